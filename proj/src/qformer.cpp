#include "mf2/qformer.hpp"

#include <algorithm>
#include <cmath>

namespace mf2 {

using ag::Var;

QFormerMode qformer_mode_from_string(const std::string& s) {
    if (s == "itc") return QFormerMode::Itc;
    if (s == "itm") return QFormerMode::Itm;
    if (s == "itg") return QFormerMode::Itg;
    if (s == "infer") return QFormerMode::Infer;
    fail(ErrKind::UnknownMode, "'" + s + "'");
}

ItgStyle itg_style_from_string(const std::string& s) {
    if (s == "masked") return ItgStyle::Masked;
    if (s == "causal") return ItgStyle::Causal;
    fail(ErrKind::UnknownMode, "itg_style '" + s + "'");
}

QFormer::QFormer(ag::ParamStore& store, const std::string& prefix, const QFormerConfig& cfg,
                 Rng& rng)
    : cfg_(cfg) {
    queries_ = store.add(prefix + ".queries", cfg.n_queries, cfg.embed_dim, nn::init_normal, rng);
    for (int i = 0; i < cfg.n_blocks; ++i) {
        std::string bn = prefix + ".block" + std::to_string(i);
        QFormerBlock b;
        b.sa = nn::MultiHeadAttention(store, bn + ".sa", cfg.embed_dim, cfg.n_heads, rng);
        b.ca = nn::MultiHeadAttention(store, bn + ".ca", cfg.embed_dim, cfg.n_heads, rng);
        b.ffn = nn::Ffn(store, bn + ".ffn", cfg.embed_dim, cfg.ffn_dim, rng);
        b.ln_sa = nn::LayerNorm(store, bn + ".ln_sa", cfg.embed_dim);
        b.ln_ca = nn::LayerNorm(store, bn + ".ln_ca", cfg.embed_dim);
        b.ln_ffn = nn::LayerNorm(store, bn + ".ln_ffn", cfg.embed_dim);
        blocks_.push_back(std::move(b));
    }
    vis_proj_ = nn::Linear(store, prefix + ".vis_proj", cfg.embed_dim, cfg.d_proj, rng);
    txt_proj_ = nn::Linear(store, prefix + ".txt_proj", cfg.embed_dim, cfg.d_proj, rng);
    itm_head_ = nn::Linear(store, prefix + ".itm_head", cfg.embed_dim, 1, rng);
    if (cfg.learnable_temperature) {
        Rng dummy(1);
        temp_ = store.add(prefix + ".temperature", 1, 1,
                          [&cfg](Rng&) { return cfg.temperature; }, dummy);
    }
}

double QFormer::temperature_value() const {
    return cfg_.learnable_temperature ? temp_.value()[0] : cfg_.temperature;
}

namespace {

// Visibility of source column `src` from destination row `dst` in the joint
// [queries; text] sequence. Text self-visibility is bidirectional for itc and
// itm, causal or bidirectional for itg depending on style.
bool visible(QFormerMode mode, ItgStyle style, int n_q, int dst, int src) {
    const bool dst_q = dst < n_q;
    const bool src_q = src < n_q;
    switch (mode) {
        case QFormerMode::Itc:
            return dst_q == src_q;
        case QFormerMode::Itm:
            return true;
        case QFormerMode::Itg:
            if (dst_q) return src_q;     // queries never see text
            if (src_q) return true;      // text always sees queries
            if (style == ItgStyle::Causal) return src <= dst;
            return true;                 // masked-LM: bidirectional text
        case QFormerMode::Infer:
            return dst_q && src_q;
    }
    fail(ErrKind::UnknownMode, "invalid QFormerMode");
}

}  // namespace

QFormerOutput QFormer::forward(const Var& visual_tokens, const TextEmbedding* text,
                               QFormerMode mode, const SideTap* query_tap,
                               const SideTap* text_tap) const {
    if (visual_tokens.cols() != cfg_.embed_dim)
        fail(ErrKind::DimMismatch, "visual token dim != embed_dim");
    if (mode != QFormerMode::Infer) {
        if (!text) fail(ErrKind::DimMismatch, "mode requires a text embedding");
        if (text->tokens.cols() != cfg_.embed_dim)
            fail(ErrKind::DimMismatch, "text token dim != embed_dim");
    }
    if (mode == QFormerMode::Infer && text)
        fail(ErrKind::InvalidArgument, "infer mode takes no text input");

    const int n_q = cfg_.n_queries;
    const int L = text ? text->tokens.rows() : 0;
    const int S = n_q + L;

    // Additive joint mask; pad columns are globally hidden.
    std::vector<double> mask(static_cast<std::size_t>(S) * S, 0.0);
    for (int dst = 0; dst < S; ++dst) {
        for (int src = 0; src < S; ++src) {
            bool ok = visible(mode, cfg_.itg_style, n_q, dst, src);
            if (ok && src >= n_q && text && text->attention_mask[src - n_q] == 0.0) ok = false;
            if (!ok) mask[static_cast<std::size_t>(dst) * S + src] = nn::kMaskOff;
        }
    }

    QFormerOutput out;
    Var q = queries_;
    Var t = text ? text->tokens : Var();
    Var side_q, side_t;

    for (int i = 0; i < cfg_.n_blocks; ++i) {
        const QFormerBlock& b = blocks_[i];
        if (query_tap) {
            Var d = query_tap->delta(i, q);
            side_q = side_q.defined() ? ag::add(side_q, d) : d;
        }
        if (text_tap && text) {
            Var d = text_tap->delta(i, t);
            side_t = side_t.defined() ? ag::add(side_t, d) : d;
        }

        Var joint = text ? ag::concat_rows({q, t}) : q;
        Var normed = b.ln_sa(joint);
        joint = ag::add(joint, b.sa.forward(normed, normed, text ? &mask : nullptr));
        q = text ? ag::slice_rows(joint, 0, n_q) : joint;
        if (text) t = ag::slice_rows(joint, n_q, S);

        q = ag::add(q, b.ca.forward(b.ln_ca(q), visual_tokens, nullptr));

        q = ag::add(q, b.ffn(b.ln_ffn(q)));
        if (text) t = ag::add(t, b.ffn(b.ln_ffn(t)));

        out.query_hidden.push_back(q);
        if (text) out.text_hidden.push_back(t);
    }

    out.query_out = side_q.defined() ? ag::add(q, side_q) : q;
    if (text) out.text_out = side_t.defined() ? ag::add(t, side_t) : t;
    return out;
}

Var QFormer::pooled_queries(const QFormerOutput& out) const { return ag::mean_rows(out.query_out); }

Var QFormer::project_visual(const Var& pooled) const {
    return ag::l2_normalize_rows(vis_proj_(pooled));
}

Var QFormer::project_text_cls(const Var& text_out) const {
    return ag::l2_normalize_rows(txt_proj_(ag::slice_rows(text_out, 0, 1)));
}

Var QFormer::itm_logit(const QFormerOutput& joint_out) const {
    return itm_head_(pooled_queries(joint_out));
}

// ---------------------------------------------------------------------------

namespace {

Var itc_loss_impl(const std::vector<AlignedPair>& pairs, const Var* temp_var, double temp_const) {
    const int M = static_cast<int>(pairs.size());
    if (M < 1) fail(ErrKind::DegenerateBatch, "empty batch");
    std::vector<Var> vis, txt;
    vis.reserve(M);
    txt.reserve(M);
    for (const auto& p : pairs) {
        if (!p.visual_embed.defined() || !p.text_embed.defined() ||
            !ag::all_finite(p.visual_embed) || !ag::all_finite(p.text_embed))
            fail(ErrKind::DegenerateBatch, "non-finite embedding");
        vis.push_back(p.visual_embed);
        txt.push_back(p.text_embed);
    }
    Var v = ag::concat_rows(vis);
    Var s = ag::concat_rows(txt);
    Var sims = ag::matmul(v, ag::transpose(s));  // [M, M]
    if (temp_var) {
        sims = ag::mul_scalar_var(sims, ag::reciprocal(*temp_var));
    } else {
        if (temp_const <= 0.0) fail(ErrKind::InvalidArgument, "temperature must be positive");
        sims = ag::scale(sims, 1.0 / temp_const);
    }
    std::vector<int> diag(M);
    for (int i = 0; i < M; ++i) diag[i] = i;
    Var v2s = ag::nll_rows(sims, diag);
    Var s2v = ag::nll_rows(ag::transpose(sims), diag);
    return ag::scale(ag::add(v2s, s2v), 1.0 / (2.0 * M));
}

}  // namespace

Var itc_loss(const std::vector<AlignedPair>& pairs, double temperature) {
    return itc_loss_impl(pairs, nullptr, temperature);
}

Var itc_loss(const std::vector<AlignedPair>& pairs, const Var& temperature) {
    return itc_loss_impl(pairs, &temperature, 0.0);
}

Var itm_loss(const Var& logits, const std::vector<int>& labels) {
    if (logits.size() != labels.size())
        fail(ErrKind::LabelMismatch, "logit count " + std::to_string(logits.size()) +
                                         " != label count " + std::to_string(labels.size()));
    std::vector<double> y;
    y.reserve(labels.size());
    for (int v : labels) {
        if (v != 0 && v != 1) fail(ErrKind::NonBinary, "match label not in {0,1}");
        y.push_back(static_cast<double>(v));
    }
    return ag::bce_with_logits(logits, y);
}

Var itg_loss(const Var& text_logits, const TokenTargets& targets) {
    if (targets.positions.empty()) fail(ErrKind::EmptyMask, "no masked positions");
    if (targets.positions.size() != targets.target_ids.size())
        fail(ErrKind::LabelMismatch, "positions/targets size mismatch");
    for (int pos : targets.positions) {
        if (pos <= 0 || pos >= text_logits.rows())
            fail(ErrKind::InvalidArgument,
                 "mask position " + std::to_string(pos) + " outside (0, L)");
    }
    Var at_mask = ag::gather_rows(text_logits, targets.positions);
    return ag::nll_rows(at_mask, targets.target_ids);
}

std::vector<MatchCandidate> sample_negatives(int batch_size, std::uint64_t seed) {
    if (batch_size < 2) fail(ErrKind::BatchTooSmall, "need at least 2 pairs for negatives");
    Rng rng(seed ^ 0x6e656773ULL);
    std::vector<MatchCandidate> out;
    out.reserve(static_cast<std::size_t>(batch_size) * 3);
    for (int i = 0; i < batch_size; ++i) {
        out.push_back({i, i, 1});
        int neg_text = static_cast<int>(rng.below(batch_size - 1));
        if (neg_text >= i) ++neg_text;
        out.push_back({i, neg_text, 0});
        int neg_img = static_cast<int>(rng.below(batch_size - 1));
        if (neg_img >= i) ++neg_img;
        out.push_back({neg_img, i, 0});
    }
    return out;
}

}  // namespace mf2
