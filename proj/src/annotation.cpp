#include "mf2/annotation.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "mf2/tokenizer.hpp"

// Pulled in lazily by RemoteClient only; the mock path never opens a socket.
#define CPPHTTPLIB_NO_EXCEPTIONS
#include <httplib.h>

namespace mf2 {

using nlohmann::json;

std::string PromptBundle::digest() const {
    return sha256_hex(caption_type_name(caption_type) + "\x1f" + initial_setup + "\x1f" +
                      output_format + "\x1f" + output_signal + "\x1f" + ground_truth_payload);
}

namespace {

const std::map<int, std::string>& au_full_names() {
    static const std::map<int, std::string> names = {
        {1, "Inner Brow Raiser"},   {2, "Outer Brow Raiser"},   {4, "Brow Lowerer"},
        {6, "Cheek Raiser"},        {7, "Lid Tightener"},       {10, "Upper Lip Raiser"},
        {12, "Lip Corner Puller"},  {15, "Lip Corner Depressor"}, {23, "Lip Tightener"},
        {24, "Lip Pressor"},        {25, "Lips Part"},          {26, "Jaw Drop"},
    };
    return names;
}

std::string render_au_payload(const FaceSample& s) {
    std::ostringstream out;
    out << "Active action units:";
    bool any = false;
    for (int i = 0; i < kNumAus; ++i) {
        if ((*s.au_labels)[i]) {
            out << " AU" << au_ids()[i];
            any = true;
        }
    }
    if (!any) out << " none";
    out << ".";
    return out.str();
}

std::string render_emotion_payload(const FaceSample& s) {
    return "Emotion label: " + emotion_names()[*s.emotion] + ".";
}

const char* emotion_flavor(int emotion) {
    switch (emotion) {
        case 0: return "the features rest in a calm, even state";
        case 1: return "the brows press down and the mouth sets hard";
        case 2: return "the upper lip lifts while the face draws back";
        case 3: return "the eyes widen and the whole face tenses";
        case 4: return "the cheeks lift and the mouth curves upward";
        case 5: return "the inner brows rise while the mouth corners sink";
        case 6: return "the brows arch high and the jaw falls open";
        default: return "the expression mixes cues that resist a single label";
    }
}

}  // namespace

std::string MockClient::generate(const FaceSample& sample, const PromptBundle& prompt) {
    // Variant choice depends only on (labels, type, seed) so regenerating a
    // dataset is reproducible record for record.
    std::string label_key = prompt.ground_truth_payload + "|" + caption_type_name(prompt.caption_type);
    std::uint64_t h = fnv1a64(label_key) ^ seed_;
    static const char* active_forms[3] = {"is active", "is clearly engaged", "shows strong activation"};
    static const char* idle_forms[3] = {"is not engaged", "shows no activation", "stays relaxed"};

    std::ostringstream out;
    switch (prompt.caption_type) {
        case CaptionType::Emotion: {
            const std::string& name = emotion_names()[*sample.emotion];
            out << "The face expresses " << name << ". Here " << emotion_flavor(*sample.emotion)
                << ", giving the expression its " << (h % 2 ? "distinct" : "recognizable")
                << " character.";
            break;
        }
        case CaptionType::Au: {
            out << "Muscle activation summary.";
            for (int i = 0; i < kNumAus; ++i) {
                int id = au_ids()[i];
                bool on = (*sample.au_labels)[i] != 0;
                const char* form = on ? active_forms[(h + id) % 3] : idle_forms[(h + id) % 3];
                out << " AU" << id << " " << au_full_names().at(id) << " " << form << ".";
            }
            break;
        }
        case CaptionType::KeyAu: {
            const std::string& name = emotion_names()[*sample.emotion];
            const auto& keys = emotion_key_aus().at(*sample.emotion);
            std::vector<int> decisive;
            for (int i = 0; i < kNumAus; ++i) {
                int id = au_ids()[i];
                if ((*sample.au_labels)[i] &&
                    std::find(keys.begin(), keys.end(), id) != keys.end())
                    decisive.push_back(id);
            }
            if (decisive.empty())
                for (int i = 0; i < kNumAus && decisive.size() < 2; ++i)
                    if ((*sample.au_labels)[i]) decisive.push_back(au_ids()[i]);
            out << "The emotion " << name << " is chiefly conveyed by";
            if (decisive.empty()) {
                out << " no dominant action units";
            } else {
                for (std::size_t i = 0; i < decisive.size(); ++i) {
                    if (i > 0) out << (i + 1 == decisive.size() ? " and" : ",");
                    out << " AU" << decisive[i] << " " << au_full_names().at(decisive[i]);
                }
            }
            out << "; these movements carry the expression.";
            break;
        }
    }
    return out.str();
}

std::string RemoteClient::generate(const FaceSample& sample, const PromptBundle& prompt) {
    json body;
    body["sample_id"] = sample.sample_id;
    body["caption_type"] = caption_type_name(prompt.caption_type);
    body["initial_setup"] = prompt.initial_setup;
    body["output_format"] = prompt.output_format;
    body["output_signal"] = prompt.output_signal;
    body["ground_truth"] = prompt.ground_truth_payload;

    httplib::Client cli(endpoint_);
    cli.set_connection_timeout(5);
    auto res = cli.Post("/v1/caption", body.dump(), "application/json");
    if (!res) fail(ErrKind::Io, "annotation endpoint unreachable: " + endpoint_);
    if (res->status != 200)
        fail(ErrKind::Io, "annotation endpoint status " + std::to_string(res->status));
    json reply = json::parse(res->body, nullptr, false);
    if (reply.is_discarded() || !reply.contains("text"))
        fail(ErrKind::Io, "annotation endpoint returned malformed body");
    return reply["text"].get<std::string>();
}

DatasetManifest filter_samples(const DatasetManifest& m) {
    DatasetManifest out;
    out.split = m.split;
    for (const auto& s : m.samples)
        if (s.fully_labeled()) out.samples.push_back(s);
    return out;
}

DatasetManifest balance_classes(const DatasetManifest& m, double tolerance, std::uint64_t seed) {
    if (tolerance < 0.0) fail(ErrKind::InvalidArgument, "negative tolerance");
    std::array<std::vector<std::size_t>, kNumEmotions> by_class;
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const auto& s = m.samples[i];
        if (!s.emotion) fail(ErrKind::InvalidArgument, "unlabeled sample in balance_classes");
        by_class[*s.emotion].push_back(i);
    }
    std::size_t min_count = std::string::npos;
    for (int c = 0; c < kNumEmotions; ++c) {
        if (by_class[c].empty())
            fail(ErrKind::EmptyClass, "emotion class '" + emotion_names()[c] + "' has no samples");
        min_count = std::min(min_count, by_class[c].size());
    }
    const auto cap = static_cast<std::size_t>(
        std::floor(static_cast<double>(min_count) * (1.0 + tolerance)));

    std::vector<bool> keep(m.samples.size(), true);
    Rng rng(seed);
    for (int c = 0; c < kNumEmotions; ++c) {
        auto& idx = by_class[c];
        if (idx.size() <= cap) continue;
        Rng class_rng = rng.fork("balance:" + emotion_names()[c]);
        std::vector<std::size_t> pool = idx;
        class_rng.shuffle(pool);
        std::set<std::size_t> chosen(pool.begin(), pool.begin() + static_cast<long>(cap));
        for (std::size_t i : idx)
            if (!chosen.count(i)) keep[i] = false;
    }

    DatasetManifest out;
    out.split = m.split;
    for (std::size_t i = 0; i < m.samples.size(); ++i)
        if (keep[i]) out.samples.push_back(m.samples[i]);
    return out;
}

std::pair<DatasetManifest, DatasetManifest> split_by_video(const DatasetManifest& m,
                                                           double train_fraction,
                                                           std::uint64_t seed) {
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
        fail(ErrKind::InvalidArgument, "train_fraction must be in (0, 1)");
    std::map<std::string, int> sizes;
    std::vector<std::string> order;
    for (const auto& s : m.samples) {
        if (!sizes.count(s.video_id)) order.push_back(s.video_id);
        sizes[s.video_id] += 1;
    }
    const int n_videos = static_cast<int>(order.size());
    if (n_videos < 2) fail(ErrKind::InsufficientVideos, std::to_string(n_videos) + " video(s)");

    int n_train = static_cast<int>(std::lround(train_fraction * n_videos));
    n_train = std::clamp(n_train, 1, n_videos - 1);

    // Seeded shuffle breaks ties among equal-size videos, then largest-first.
    Rng rng(seed);
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(),
                     [&](const std::string& a, const std::string& b) { return sizes[a] > sizes[b]; });

    const int total_images = static_cast<int>(m.samples.size());
    const double target_train = train_fraction * total_images;
    const double target_val = total_images - target_train;

    std::set<std::string> train_videos;
    int train_slots = n_train, val_slots = n_videos - n_train;
    double train_images = 0, val_images = 0;
    for (const auto& vid : order) {
        bool to_train;
        if (train_slots == 0) {
            to_train = false;
        } else if (val_slots == 0) {
            to_train = true;
        } else {
            // Feed the side whose image deficit is larger.
            to_train = (target_train - train_images) >= (target_val - val_images);
        }
        if (to_train) {
            train_videos.insert(vid);
            train_images += sizes[vid];
            --train_slots;
        } else {
            val_images += sizes[vid];
            --val_slots;
        }
    }

    DatasetManifest train, val;
    train.split = DatasetManifest::Split::Train;
    val.split = DatasetManifest::Split::Val;
    for (const auto& s : m.samples) {
        if (train_videos.count(s.video_id))
            train.samples.push_back(s);
        else
            val.samples.push_back(s);
    }
    return {std::move(train), std::move(val)};
}

PromptBundle build_prompt(const FaceSample& sample, CaptionType type) {
    bool needs_au = type == CaptionType::Au || type == CaptionType::KeyAu;
    bool needs_emotion = type == CaptionType::Emotion || type == CaptionType::KeyAu;
    if (needs_au && !sample.au_labels)
        fail(ErrKind::MissingLabel, "sample " + sample.sample_id + " lacks AU labels");
    if (needs_emotion && !sample.emotion)
        fail(ErrKind::MissingLabel, "sample " + sample.sample_id + " lacks emotion label");

    PromptBundle p;
    p.caption_type = type;
    switch (type) {
        case CaptionType::Emotion:
            p.initial_setup =
                "You are an emotion description expert. Study the face and explain the "
                "emotional state it conveys.";
            p.output_format =
                "Q: What emotion does this face express and why? A: The face expresses "
                "<emotion>. <two sentences on the visible cues>.";
            p.output_signal =
                "Answer in at most three sentences grounded in the provided emotion label.";
            p.ground_truth_payload = render_emotion_payload(sample);
            break;
        case CaptionType::Au:
            p.initial_setup =
                "You are an AU description expert. Break the expression down into facial "
                "action units and describe each one.";
            p.output_format =
                "Q: Which action units are engaged? A: AU<id> <name> <state>. One sentence "
                "per action unit, covering every unit in the list.";
            p.output_signal =
                "Describe all twelve action units, stating clearly which are active, "
                "grounded in the provided activation labels.";
            p.ground_truth_payload = render_au_payload(sample);
            break;
        case CaptionType::KeyAu:
            p.initial_setup =
                "You are an expert in facial action units and emotion. Identify the most "
                "influential action units for the expressed emotion.";
            p.output_format =
                "Q: Which action units drive this emotion? A: The emotion <emotion> is "
                "chiefly conveyed by <action units>.";
            p.output_signal =
                "Name only the decisive action units and tie them to the emotion, grounded "
                "in both provided label sets.";
            p.ground_truth_payload = render_au_payload(sample) + " " + render_emotion_payload(sample);
            break;
    }
    return p;
}

std::vector<CaptionViolation> validate_caption(const CaptionRecord& rec, int key_au_budget) {
    std::vector<CaptionViolation> v;
    if (rec.text.empty()) {
        v.push_back(CaptionViolation::EmptyCaption);
        return v;
    }
    int count = static_cast<int>(segment_text(rec.text).size());
    if (count > caption_max_tokens(rec.caption_type, key_au_budget))
        v.push_back(CaptionViolation::LengthExceeded);
    return v;
}

AnnotateResult annotate_dataset(const DatasetManifest& m, AnnotationClient& client,
                                const std::vector<CaptionType>& types,
                                const AnnotateOptions& opts) {
    AnnotateResult result;
    for (const auto& sample : m.samples) {
        for (CaptionType type : types) {
            PromptBundle prompt = build_prompt(sample, type);
            CaptionRecord rec;
            rec.sample_id = sample.sample_id;
            rec.caption_type = type;
            rec.prompt_hash = prompt.digest();
            bool ok = false;
            for (int attempt = 0; attempt < 2 && !ok; ++attempt) {
                rec.text = client.generate(sample, prompt);
                rec.token_count = static_cast<int>(segment_text(rec.text).size());
                ok = validate_caption(rec, opts.key_au_budget).empty();
            }
            if (ok)
                result.records.push_back(std::move(rec));
            else
                result.failed.push_back({sample.sample_id, type});
        }
    }
    std::sort(result.records.begin(), result.records.end(),
              [](const CaptionRecord& a, const CaptionRecord& b) {
                  if (a.sample_id != b.sample_id) return a.sample_id < b.sample_id;
                  return static_cast<int>(a.caption_type) < static_cast<int>(b.caption_type);
              });
    return result;
}

std::string serialize_captions(const std::vector<CaptionRecord>& records) {
    std::ostringstream out;
    for (const auto& r : records) {
        json j;
        j["sample_id"] = r.sample_id;
        j["caption_type"] = caption_type_name(r.caption_type);
        j["text"] = r.text;
        j["prompt_hash"] = r.prompt_hash;
        out << j.dump() << "\n";
    }
    return out.str();
}

std::vector<CaptionRecord> load_captions(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::vector<CaptionRecord> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("sample_id") || !j.contains("caption_type") ||
            !j.contains("text"))
            fail(ErrKind::MalformedRecord, "caption line " + std::to_string(line_no));
        CaptionRecord r;
        r.sample_id = j["sample_id"].get<std::string>();
        r.caption_type = caption_type_from_string(j["caption_type"].get<std::string>());
        r.text = j["text"].get<std::string>();
        r.token_count = static_cast<int>(segment_text(r.text).size());
        r.prompt_hash = j.value("prompt_hash", "");
        out.push_back(std::move(r));
    }
    return out;
}

void save_captions(const std::string& path, const std::vector<CaptionRecord>& records) {
    write_text_file(path, serialize_captions(records));
}

std::vector<std::string> split_au_caption(const std::string& text) {
    // Sentences end at '.'; each AU's sentence is located by its "au<id>" token.
    std::vector<std::string> sentences;
    std::string cur;
    for (char c : text) {
        cur.push_back(c);
        if (c == '.') {
            sentences.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) sentences.push_back(cur);

    std::vector<std::string> out(kNumAus);
    for (int i = 0; i < kNumAus; ++i) {
        std::string tag = "au" + std::to_string(au_ids()[i]);
        bool found = false;
        for (const auto& sent : sentences) {
            auto segs = segment_text(sent);
            if (std::find(segs.begin(), segs.end(), tag) != segs.end()) {
                out[i] = sent;
                found = true;
                break;
            }
        }
        if (!found)
            fail(ErrKind::MissingCaption, "AU" + std::to_string(au_ids()[i]));
    }
    return out;
}

}  // namespace mf2
