#include "mf2/metrics.hpp"

#include <json.hpp>

#include <cstdio>
#include <sstream>

namespace mf2 {

std::pair<std::map<int, double>, double> f1_per_au(const std::vector<AuVector>& preds,
                                                   const std::vector<AuVector>& gts) {
    if (preds.size() != gts.size())
        fail(ErrKind::ShapeMismatch, "preds and gts row counts differ");
    for (const auto* rows : {&preds, &gts})
        for (const auto& row : *rows)
            for (int v : row)
                if (v != 0 && v != 1) fail(ErrKind::NonBinary, "AU entry not in {0,1}");

    std::map<int, double> per_au;
    double macro = 0.0;
    for (int a = 0; a < kNumAus; ++a) {
        long tp = 0, fp = 0, fn = 0;
        for (std::size_t b = 0; b < preds.size(); ++b) {
            int p = preds[b][a], g = gts[b][a];
            if (p == 1 && g == 1) ++tp;
            if (p == 1 && g == 0) ++fp;
            if (p == 0 && g == 1) ++fn;
        }
        double precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        double recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        double f1 = (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall)
                                               : 0.0;
        per_au[au_ids()[a]] = 100.0 * f1;
        macro += 100.0 * f1;
    }
    macro /= kNumAus;
    return {per_au, macro};
}

std::pair<std::map<std::string, double>, double> accuracy_per_class(
    const std::vector<int>& preds, const std::vector<int>& gts) {
    if (preds.size() != gts.size())
        fail(ErrKind::ShapeMismatch, "preds and gts lengths differ");
    for (const auto* v : {&preds, &gts})
        for (int c : *v)
            if (c < 0 || c >= kNumEmotions)
                fail(ErrKind::UnknownClassId, "class id " + std::to_string(c));

    std::array<long, kNumEmotions> total{}, correct{};
    for (std::size_t i = 0; i < gts.size(); ++i) {
        ++total[gts[i]];
        if (preds[i] == gts[i]) ++correct[gts[i]];
    }
    std::map<std::string, double> per_class;
    double macro = 0.0;
    int present = 0;
    for (int c = 0; c < kNumEmotions; ++c) {
        if (total[c] == 0) continue;
        double acc = 100.0 * static_cast<double>(correct[c]) / total[c];
        per_class[emotion_names()[c]] = acc;
        macro += acc;
        ++present;
    }
    macro = present ? macro / present : 0.0;
    return {per_class, macro};
}

std::string MetricsReport::to_json() const {
    nlohmann::json j;
    nlohmann::json au = nlohmann::json::object();
    for (const auto& [id, f1] : per_au_f1) au["AU" + std::to_string(id)] = f1;
    j["per_au_f1"] = std::move(au);
    j["au_macro_f1"] = au_macro_f1;
    j["per_emotion_acc"] = per_emotion_acc;
    j["emotion_macro_acc"] = emotion_macro_acc;
    j["trainable_params"] = trainable_params;
    j["train_time_per_epoch_s"] = train_time_per_epoch;
    j["infer_time_per_epoch_s"] = infer_time_per_epoch;
    return j.dump();
}

namespace {

std::string fixed(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%7.2f", v);
    return buf;
}

}  // namespace

std::string render_au_table(const MetricsReport& r) {
    std::ostringstream out;
    for (int id : au_ids()) out << "  AU" << id << (id < 10 ? " " : "");
    out << "   Avg.\n";
    for (int id : au_ids()) {
        auto it = r.per_au_f1.find(id);
        out << fixed(it != r.per_au_f1.end() ? it->second : 0.0);
    }
    out << fixed(r.au_macro_f1) << "\n";
    return out.str();
}

std::string render_emotion_table(const MetricsReport& r) {
    std::ostringstream out;
    for (const auto& name : emotion_names()) out << " " << name;
    out << "   Avg.\n";
    for (const auto& name : emotion_names()) {
        auto it = r.per_emotion_acc.find(name);
        out << " " << fixed(it != r.per_emotion_acc.end() ? it->second : 0.0);
    }
    out << fixed(r.emotion_macro_acc) << "\n";
    return out.str();
}

}  // namespace mf2
