#pragma once

// Training loop (seeded shuffling, linear warmup, decoupled weight decay,
// best-checkpoint tracking), image-only evaluation, the ablation matrix and
// the pretrain -> fine-tune transition scenario.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mf2/config.hpp"
#include "mf2/dfn.hpp"
#include "mf2/metrics.hpp"

namespace mf2 {

struct TrainData {
    DatasetManifest train;
    DatasetManifest val;
    std::map<std::string, TrainingCaptions> captions;  // sample_id ->
    std::string input_hash;                            // sha over manifests + captions
};

// Groups caption records per sample and splits AU captions into per-AU texts.
// Samples without required captions are rejected when alignment training
// needs them; evaluation-only flows may pass an empty record set.
TrainData make_train_data(DatasetManifest train, DatasetManifest val,
                          const std::vector<CaptionRecord>& records);

std::shared_ptr<Tokenizer> tokenizer_from_captions(const std::vector<CaptionRecord>& records);

// Rebuilds a model from a checkpoint, re-attaching its fine-tuning network
// when the checkpoint carries one.
MF2Model load_model_checkpoint(const std::string& path);

struct RunRecord {
    std::string config_echo;  // json
    std::string input_hash;
    MetricsReport metrics;
    std::vector<double> epoch_losses;
    std::vector<LossReport> epoch_reports;
    std::map<std::string, double> timings;  // seconds; excluded from the hash
    std::string checkpoint_path;
    bool aborted_nan = false;
    std::string content_hash;

    void finalize_hash();
    std::string to_json() const;
};

// Trains in place. Checkpoints the best-macro model under run_dir (best.ckpt
// and last.ckpt); a non-finite loss aborts the run and keeps the last good
// checkpoint. Empty run_dir skips checkpointing.
RunRecord train_model(MF2Model& model, const TrainData& data, const TrainSchedule& sched,
                      std::uint64_t seed, const std::string& config_echo,
                      const std::string& run_dir);

// forward_infer over the split; enforces that the text encoder is never
// touched while evaluating.
MetricsReport evaluate_model(const MF2Model& model, const DatasetManifest& split);

// ---- ablation matrix ----

enum class AblationVariant { FullFinetune, WithoutEmoVl, WithoutAuVl, DfnFinetune };

AblationVariant ablation_variant_from_string(const std::string& s);
std::string ablation_variant_name(AblationVariant v);

struct AblationResult {
    AblationVariant variant = AblationVariant::FullFinetune;
    RunRecord record;
    std::size_t trainable_params = 0;
    double train_time_per_epoch = 0.0;
};

AblationResult run_ablation(AblationVariant variant, const RunConfig& cfg, const TrainData& data,
                            std::shared_ptr<Tokenizer> tok, const std::string& run_dir);

// ---- DFN fine-tuning and the transition scenario ----

struct FinetuneOutcome {
    RunRecord record;
    FreezeReport freeze;
    std::string backbone_before;
    std::string backbone_after;
};

// Attaches the side network, reinitializes the task heads, freezes the
// backbone and trains with the task objective (CE only unless
// finetune.use_alignment is set).
FinetuneOutcome finetune_model(MF2Model& model, const RunConfig& cfg, const TrainData& data,
                               const std::string& run_dir);

struct TransitionResult {
    RunRecord pretrain;        // AU-objective phase
    FinetuneOutcome finetune;  // emotion-objective phase
    MetricsReport untrained_baseline;
};

TransitionResult run_transition(const RunConfig& cfg, const TrainData& data,
                                std::shared_ptr<Tokenizer> tok, const std::string& run_dir);

// Warmup length used by a run: the configured step count, clipped to a tenth
// of the total steps so short desk runs are not all warmup.
long effective_warmup_steps(const TrainSchedule& sched, int n_train_samples);

// ---- presets and bookkeeping ----

// Production-width preset (768-dim, 12-block stacks, BERT-sized vocabulary)
// used for parameter accounting.
MF2Config full_scale_config();
DFNConfig full_scale_dfn_config();

struct ParamCount {
    std::size_t total = 0;
    std::size_t trainable = 0;  // adapters + task heads under a frozen backbone
    double trainable_fraction = 0.0;
};

// Counts parameters without materializing them.
ParamCount count_dfn_finetune_params(const MF2Config& model_cfg, const DFNConfig& dfn_cfg);

std::string resolve_run_dir(const RunConfig& cfg);

}  // namespace mf2
