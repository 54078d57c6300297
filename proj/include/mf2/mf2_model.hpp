#pragma once

// Composes the global branch (emotion-caption alignment over whole-face
// tokens) and the local branch (per-AU caption alignment over landmark
// regions, one shared Q-former for all twelve AUs) with the recognition heads
// and the joint objective. Inference consumes images alone; the text path is
// unreachable from forward_infer by construction.

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mf2/annotation.hpp"
#include "mf2/encoders.hpp"
#include "mf2/qformer.hpp"

namespace mf2 {

struct ModelLambdas {
    double itc = 1.0;
    double itm = 1.0;
    double itg = 1.0;
    double ce_au = 1.0;
    double ce_emo = 1.0;
};

struct MF2Config {
    EncoderConfig encoders;
    QFormerConfig qformer_emo;
    QFormerConfig qformer_au;
    ModelLambdas lambdas;
    bool use_key_au_for_emo = false;  // feed key-AU captions to the global branch
    bool freeze_encoders = true;      // encoders stand in for frozen pretrained backbones
    bool emo_branch_enabled = true;
    bool au_branch_enabled = true;
    double itg_mask_fraction = 0.15;
    int vocab_size = 0;  // 0 = derive from tokenizer
    std::uint64_t seed = 0;
};

struct LossReport {
    double emo_itc = 0, emo_itm = 0, emo_itg = 0;
    double au_itc = 0, au_itm = 0, au_itg = 0;
    double ce_au = 0, ce_emo = 0;
    double total = 0;
    std::array<double, kNumAus> per_au_itc{};
    std::array<double, kNumAus> per_au_itm{};
    std::array<double, kNumAus> per_au_itg{};

    double weighted_sum(const ModelLambdas& l) const {
        return l.itc * (emo_itc + au_itc) + l.itm * (emo_itm + au_itm) +
               l.itg * (emo_itg + au_itg) + l.ce_au * ce_au + l.ce_emo * ce_emo;
    }
};

double total_loss(const LossReport& report, const ModelLambdas& lambdas);

struct TrainingCaptions {
    std::string emotion_text;
    std::array<std::string, kNumAus> au_texts;
    std::optional<std::string> key_au_text;
};

// Builds per-AU texts by splitting the AU caption at its "AU<id>" sentences.
TrainingCaptions make_training_captions(const std::string& emotion_caption,
                                        const std::string& au_caption,
                                        std::optional<std::string> key_au_caption = {});

struct MF2Output {
    std::vector<double> emotion_logits;               // [8]
    std::vector<double> au_logits;                    // [12]
    std::vector<double> emo_visual_embed;             // [d_proj] unit norm
    std::vector<double> emo_text_embed;               // empty at inference
    std::vector<std::vector<double>> au_visual_embeds;
    std::vector<std::vector<double>> au_text_embeds;
};

// Side-adapter attachment points; installed by the fine-tuning network.
struct DfnHooks {
    std::shared_ptr<SideTap> emo_query, emo_text, au_query, au_text;
    std::function<ag::Var(const ag::Var&)> vis_cls;  // cls_last_layer tap mode
    std::function<ag::Var(const ag::Var&)> txt_cls;
};

class MF2Model {
public:
    MF2Model(const MF2Config& cfg, std::shared_ptr<Tokenizer> tok,
             ag::ParamStore::Mode mode = ag::ParamStore::Mode::Materialize);

    const MF2Config& config() const { return cfg_; }
    // Objective re-weighting for a new task (used by fine-tuning flows).
    void set_lambdas(const ModelLambdas& lambdas) { cfg_.lambdas = lambdas; }
    ag::ParamStore& params() { return store_; }
    const ag::ParamStore& params() const { return store_; }
    TextEncoder& text_encoder() { return *txt_; }
    const TextEncoder& text_encoder() const { return *txt_; }
    const VisualEncoder& visual_encoder() const { return *vis_; }
    const QFormer& emo_qformer() const { return qf_emo_; }
    const QFormer& au_qformer() const { return qf_au_; }

    MF2Output forward_infer(const FaceSample& sample) const;
    std::vector<MF2Output> forward_infer_batch(const std::vector<const FaceSample*>& batch) const;

    // Per-AU logits straight from explicit region tokens (inspection surface;
    // each AU flows through the shared local stack into its own probe).
    std::vector<double> au_logits_from_regions(const std::vector<ag::Var>& regions) const;

    struct TrainItem {
        const FaceSample* sample = nullptr;
        const TrainingCaptions* captions = nullptr;
    };

    struct TrainResult {
        ag::Var loss;  // graph root, weighted total
        LossReport report;
        std::vector<MF2Output> outputs;
    };

    TrainResult forward_train(const FaceSample& sample, const TrainingCaptions& captions,
                              std::uint64_t step_seed = 0);
    TrainResult forward_train_batch(const std::vector<TrainItem>& batch, std::uint64_t step_seed);

    // DFN attachment surface. The config echo is an opaque JSON blob persisted
    // in checkpoints so loading can rebuild the same adapter layout.
    bool dfn_attached() const { return hooks_.has_value(); }
    void install_dfn_hooks(DfnHooks hooks, std::string dfn_config_json);
    const DfnHooks* dfn_hooks() const { return hooks_ ? &*hooks_ : nullptr; }
    const std::string& dfn_config_echo() const { return dfn_config_json_; }

    // Reinitializes the task heads (used when fine-tuning starts a new task).
    void reinit_heads(std::uint64_t seed);

    void save_checkpoint(const std::string& path) const;
    // strict: parameter names must match the checkpoint exactly.
    void load_checkpoint(const std::string& path, bool strict = true);
    static MF2Model from_checkpoint(const std::string& path);

private:
    struct SamplePaths;  // per-sample forward state shared by train losses

    SamplePaths infer_paths(const FaceSample& sample) const;
    void finish_heads(SamplePaths& p) const;
    MF2Output paths_to_output(const SamplePaths& p) const;
    ag::Var branch_itg(const QFormer& qf, const ag::Var& visual_tokens, const TextEmbedding& text,
                       const ag::Var& itg_bias, std::uint64_t step_seed, const SideTap* qtap,
                       const SideTap* ttap) const;

    MF2Config cfg_;
    ag::ParamStore store_;
    std::shared_ptr<Tokenizer> tok_;
    std::unique_ptr<VisualEncoder> vis_;
    std::unique_ptr<TextEncoder> txt_;
    QFormer qf_emo_;
    QFormer qf_au_;
    nn::Linear emo_head_;
    std::vector<nn::Linear> au_heads_;
    ag::Var emo_itg_bias_, au_itg_bias_;
    AULandmarkMap au_map_;
    std::optional<DfnHooks> hooks_;
    std::string dfn_config_json_;
};

// Config <-> JSON round-trip used by checkpoints and run records.
std::string mf2_config_to_json(const MF2Config& cfg);
MF2Config mf2_config_from_json(const std::string& text);

}  // namespace mf2
