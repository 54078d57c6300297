#pragma once

// Small composable layers over the autograd Var type. All parameters register
// through a ParamStore so counting, freezing and checkpointing see one flat
// namespace.

#include <cmath>
#include <string>
#include <vector>

#include "mf2/tensor.hpp"

namespace mf2::nn {

using ag::ParamStore;
using ag::Var;

inline constexpr double kMaskOff = -1e30;

inline double init_normal(Rng& rng) { return rng.normal(0.0, 0.08); }

struct Linear {
    Var w, b;

    Linear() = default;
    Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
        w = store.add(name + ".w", in, out, init_normal, rng);
        b = store.add_zeros(name + ".b", 1, out);
    }

    Var operator()(const Var& x) const { return ag::add_rowvec(ag::matmul(x, w), b); }
};

struct LayerNorm {
    Var gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& name, int dim) {
        Rng dummy(1);
        gamma = store.add(name + ".gamma", 1, dim, [](Rng&) { return 1.0; }, dummy);
        beta = store.add_zeros(name + ".beta", 1, dim);
    }

    Var operator()(const Var& x) const { return ag::layer_norm_rows(x, gamma, beta); }
};

// Multi-head attention; the additive mask is [n_q, n_k] with kMaskOff at
// hidden links. Pass nullptr for full visibility.
struct MultiHeadAttention {
    Linear wq, wk, wv, wo;
    int n_heads = 1;
    int dim = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& store, const std::string& name, int dim_, int n_heads_, Rng& rng)
        : n_heads(n_heads_), dim(dim_) {
        if (dim_ % n_heads_ != 0) fail(ErrKind::DimMismatch, name + ": dim % heads != 0");
        wq = Linear(store, name + ".wq", dim_, dim_, rng);
        wk = Linear(store, name + ".wk", dim_, dim_, rng);
        wv = Linear(store, name + ".wv", dim_, dim_, rng);
        wo = Linear(store, name + ".wo", dim_, dim_, rng);
    }

    Var forward(const Var& q_in, const Var& kv_in, const std::vector<double>* mask) const {
        const int hd = dim / n_heads;
        Var q = wq(q_in), k = wk(kv_in), v = wv(kv_in);
        std::vector<Var> heads;
        heads.reserve(n_heads);
        const double scale_factor = 1.0 / std::sqrt(static_cast<double>(hd));
        for (int h = 0; h < n_heads; ++h) {
            Var qh = ag::slice_cols(q, h * hd, (h + 1) * hd);
            Var kh = ag::slice_cols(k, h * hd, (h + 1) * hd);
            Var vh = ag::slice_cols(v, h * hd, (h + 1) * hd);
            Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), scale_factor);
            Var attn = ag::softmax_rows(scores, mask);
            heads.push_back(ag::matmul(attn, vh));
        }
        return wo(ag::concat_cols(heads));
    }
};

struct Ffn {
    Linear up, down;

    Ffn() = default;
    Ffn(ParamStore& store, const std::string& name, int dim, int hidden, Rng& rng) {
        up = Linear(store, name + ".up", dim, hidden, rng);
        down = Linear(store, name + ".down", hidden, dim, rng);
    }

    Var operator()(const Var& x) const { return down(ag::relu(up(x))); }
};

// Pre-norm block: x + SA(LN(x)), x + FFN(LN(x)).
struct TransformerBlock {
    MultiHeadAttention sa;
    Ffn ffn;
    LayerNorm ln_sa, ln_ffn;

    TransformerBlock() = default;
    TransformerBlock(ParamStore& store, const std::string& name, int dim, int n_heads, int ffn_dim,
                     Rng& rng) {
        sa = MultiHeadAttention(store, name + ".sa", dim, n_heads, rng);
        ffn = Ffn(store, name + ".ffn", dim, ffn_dim, rng);
        ln_sa = LayerNorm(store, name + ".ln_sa", dim);
        ln_ffn = LayerNorm(store, name + ".ln_ffn", dim);
    }

    Var forward(const Var& x, const std::vector<double>* mask) const {
        Var normed = ln_sa(x);
        Var h = ag::add(x, sa.forward(normed, normed, mask));
        return ag::add(h, ffn(ln_ffn(h)));
    }
};

}  // namespace mf2::nn
