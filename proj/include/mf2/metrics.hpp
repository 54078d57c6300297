#pragma once

// Per-AU F1 and per-class accuracy with macro averages, plus the report
// rendering that mirrors the AU-columns / emotion-columns table layout.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "mf2/data_model.hpp"

namespace mf2 {

struct MetricsReport {
    std::map<int, double> per_au_f1;                 // AU id -> percent
    double au_macro_f1 = 0.0;
    std::map<std::string, double> per_emotion_acc;   // class name -> percent (present classes)
    double emotion_macro_acc = 0.0;
    std::size_t trainable_params = 0;
    double train_time_per_epoch = 0.0;  // seconds
    double infer_time_per_epoch = 0.0;  // seconds

    std::string to_json() const;
};

using AuVector = std::array<int, kNumAus>;

// F1 = 2PR/(P+R) from per-AU confusion counts; an AU with no precision or
// recall signal scores 0 (affects macro averages on sparse fixtures).
std::pair<std::map<int, double>, double> f1_per_au(const std::vector<AuVector>& preds,
                                                   const std::vector<AuVector>& gts);

// Per-class accuracy over ground-truth membership; macro over classes present
// in gts so tiny fixtures stay meaningful.
std::pair<std::map<std::string, double>, double> accuracy_per_class(const std::vector<int>& preds,
                                                                    const std::vector<int>& gts);

// Fixed-width tables, AU columns in canonical order / 8 emotion columns.
std::string render_au_table(const MetricsReport& r);
std::string render_emotion_table(const MetricsReport& r);

}  // namespace mf2
