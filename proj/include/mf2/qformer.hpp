#pragma once

// Q-former block stack shared by both alignment branches: learned query
// tokens, joint self-attention with task-dependent visibility, cross-attention
// into visual tokens, and the three alignment losses. Self-attention and FFN
// weights are the same objects on the query and text paths; that coupling is
// what the decoupled fine-tuning network later works around.

#include <cstdint>
#include <string>
#include <vector>

#include "mf2/encoders.hpp"
#include "mf2/nn.hpp"

namespace mf2 {

enum class QFormerMode { Itc, Itm, Itg, Infer };
enum class ItgStyle { Masked, Causal };

QFormerMode qformer_mode_from_string(const std::string& s);  // throws UnknownMode
ItgStyle itg_style_from_string(const std::string& s);

struct QFormerConfig {
    int n_blocks = 2;
    int n_queries = 8;
    int embed_dim = 64;
    int n_heads = 4;
    int ffn_dim = 128;
    double temperature = 0.07;
    bool learnable_temperature = false;
    ItgStyle itg_style = ItgStyle::Masked;
    int d_proj = 32;
    std::uint64_t negatives_seed = 12345;
};

// Residual deltas injected by side adapters; the stack queries one delta per
// block, fed with that block's pathway input, and adds the accumulated sum to
// the pathway's final hidden state.
class SideTap {
public:
    virtual ~SideTap() = default;
    virtual ag::Var delta(int block_index, const ag::Var& block_input) const = 0;
};

struct QFormerOutput {
    ag::Var query_out;                     // [n_queries, D]
    ag::Var text_out;                      // undefined in infer mode
    std::vector<ag::Var> query_hidden;     // one per block
    std::vector<ag::Var> text_hidden;      // one per block (empty in infer)
};

struct QFormerBlock {
    nn::MultiHeadAttention sa;   // joint over [queries; text]
    nn::MultiHeadAttention ca;   // queries attending to visual tokens
    nn::Ffn ffn;                 // applied to both paths
    nn::LayerNorm ln_sa, ln_ca, ln_ffn;
};

class QFormer {
public:
    QFormer() = default;
    QFormer(ag::ParamStore& store, const std::string& prefix, const QFormerConfig& cfg, Rng& rng);

    const QFormerConfig& config() const { return cfg_; }
    const std::vector<QFormerBlock>& blocks() const { return blocks_; }
    ag::Var query_tokens() const { return queries_; }

    QFormerOutput forward(const ag::Var& visual_tokens, const TextEmbedding* text,
                          QFormerMode mode, const SideTap* query_tap = nullptr,
                          const SideTap* text_tap = nullptr) const;

    // Projection heads used by the alignment losses.
    ag::Var pooled_queries(const QFormerOutput& out) const;       // [1, D]
    ag::Var project_visual(const ag::Var& pooled) const;          // [1, d_proj], unit norm
    ag::Var project_text_cls(const ag::Var& text_out) const;      // [1, d_proj], unit norm
    ag::Var itm_logit(const QFormerOutput& joint_out) const;      // [1, 1]

    // Temperature as configured; learnable variant exposes a parameter.
    bool temperature_is_learnable() const { return cfg_.learnable_temperature; }
    ag::Var temperature_param() const { return temp_; }
    double temperature_value() const;

private:
    QFormerConfig cfg_;
    ag::Var queries_;
    std::vector<QFormerBlock> blocks_;
    nn::Linear vis_proj_, txt_proj_, itm_head_;
    ag::Var temp_;  // defined only when learnable
};

// ---- alignment losses ----

struct AlignedPair {
    ag::Var visual_embed;  // [1, d_proj], unit norm
    ag::Var text_embed;    // [1, d_proj], unit norm
};

// Symmetric two-direction InfoNCE with 1/(2M) normalization; sim = dot.
ag::Var itc_loss(const std::vector<AlignedPair>& pairs, double temperature);
ag::Var itc_loss(const std::vector<AlignedPair>& pairs, const ag::Var& temperature);

// Summed binary cross-entropy over match candidates.
ag::Var itm_loss(const ag::Var& logits, const std::vector<int>& labels);

struct TokenTargets {
    std::vector<int> positions;   // row indices into the text sequence, never 0
    std::vector<int> target_ids;  // original token ids at those positions
};

// Sum over masked positions of -log p(target | visible context); logits are
// the full [L, vocab] text logits.
ag::Var itg_loss(const ag::Var& text_logits, const TokenTargets& targets);

struct MatchCandidate {
    int image_index = 0;
    int text_index = 0;
    int label = 0;  // 1 = matched pair
};

// For each of M positives: the positive, one in-batch negative text, one
// in-batch negative image. 3M candidates, seeded-deterministic.
std::vector<MatchCandidate> sample_negatives(int batch_size, std::uint64_t seed);

}  // namespace mf2
