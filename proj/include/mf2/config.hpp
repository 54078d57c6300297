#pragma once

// Run configuration: flat-text dotted-key files plus command-line overrides.
// Unknown keys and type errors are rejected naming the exact key; the parsed
// config is echoed verbatim into every run record.

#include <string>
#include <vector>

#include "mf2/dfn.hpp"
#include "mf2/mf2_model.hpp"

namespace mf2 {

struct TrainSchedule {
    double lr = 1e-4;
    double weight_decay = 0.05;
    int warmup_steps = 2000;  // clipped to total_steps/10 on small runs
    int epochs = 30;
    int batch_size = 8;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string run_dir;  // empty = content-addressed under MF2_RUN_ROOT

    struct Data {
        std::string dir;  // base for image paths
        std::string train_manifest;
        std::string val_manifest;
        std::string captions;
        double tolerance = 0.10;
        double train_fraction = kDefaultTrainFraction;
    } data;

    struct Annotate {
        std::string types = "au,emotion,key_au";
        std::string client = "mock";
        std::string endpoint_env = "MF2_LLM_ENDPOINT";
        int key_au_budget = 169;
    } annotate;

    std::string vocab_path;  // optional pre-built tokenizer
    MF2Config model;         // encoders + both q-former branches + lambdas
    DFNConfig dfn;
    TrainSchedule train;

    struct Finetune {
        std::string task = "emotion";  // au | emotion
        bool use_alignment = false;    // CE-only by default
        // Schedule overrides for the fine-tuning phase; 0 inherits train.*.
        double lr = 0.0;
        int epochs = 0;
        int batch_size = 0;
    } finetune;

    // The fine-tuning phase schedule with overrides applied.
    TrainSchedule finetune_schedule() const;

    std::string eval_split = "val";

    std::string to_json() const;
};

// Parses the file (empty path = all defaults) then applies key=value
// overrides in order. Errors: MissingFile, UnknownKey, ConfigType.
RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides = {});

// Applies one dotted key=value assignment.
void apply_config_override(RunConfig& cfg, const std::string& key, const std::string& value);

// Documented defaults for every key, one per line.
std::string config_reference();

}  // namespace mf2
