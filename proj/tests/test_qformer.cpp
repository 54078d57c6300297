#include <doctest.h>

#include <functional>

#include <cmath>

#include "grad_check.hpp"
#include "mf2/qformer.hpp"

using namespace mf2;
using ag::Var;

namespace {

ErrKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrKind::Io;
}

QFormerConfig toy_qf(int n_blocks = 2, ItgStyle style = ItgStyle::Causal) {
    QFormerConfig cfg;
    cfg.n_blocks = n_blocks;
    cfg.n_queries = 4;
    cfg.embed_dim = 16;
    cfg.n_heads = 2;
    cfg.ffn_dim = 32;
    cfg.d_proj = 8;
    cfg.itg_style = style;
    return cfg;
}

Var random_tokens(Rng& rng, int rows, int cols) {
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (auto& x : v) x = rng.normal(0.0, 1.0);
    return Var::constant(rows, cols, std::move(v));
}

TextEmbedding synthetic_text(Rng& rng, int L, int D) {
    TextEmbedding t;
    t.tokens = random_tokens(rng, L, D);
    t.attention_mask.assign(L, 1.0);
    for (int i = 0; i < L; ++i) t.ids.push_back(i + 3);
    return t;
}

AlignedPair unit_pair(std::vector<double> v, std::vector<double> s) {
    const int vc = static_cast<int>(v.size());
    const int sc = static_cast<int>(s.size());
    return {Var::constant(1, vc, std::move(v)), Var::constant(1, sc, std::move(s))};
}

}  // namespace

TEST_SUITE("qformer") {

TEST_CASE("itc closed forms") {
    // One pair: the softmax has a single entry, loss is exactly zero.
    std::vector<AlignedPair> single = {unit_pair({1, 0}, {1, 0})};
    CHECK(itc_loss(single, 1.0).scalar() == 0.0);

    // Orthonormal two-pair batch at tau=1: every direction term is
    // log(1 + e^-1).
    std::vector<AlignedPair> pairs = {unit_pair({1, 0}, {1, 0}), unit_pair({0, 1}, {0, 1})};
    double expect = std::log(1.0 + std::exp(-1.0));
    CHECK(std::abs(itc_loss(pairs, 1.0).scalar() - expect) < 1e-9);

    // Sharpening the temperature drives the loss to zero monotonically.
    double l1 = itc_loss(pairs, 1.0).scalar();
    double l2 = itc_loss(pairs, 0.5).scalar();
    double l3 = itc_loss(pairs, 0.07).scalar();
    CHECK(l1 > l2);
    CHECK(l2 > l3);
    CHECK(l3 > 0.0);
    CHECK(l3 < 1e-5);

    // Non-finite embeddings are rejected.
    std::vector<AlignedPair> bad = {unit_pair({std::nan(""), 0}, {1, 0}),
                                    unit_pair({0, 1}, {0, 1})};
    CHECK(kind_of([&] { itc_loss(bad, 1.0); }) == ErrKind::DegenerateBatch);
}

TEST_CASE("itc properties: permutation invariance and lower bound") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        int M = 2 + static_cast<int>(rng.below(5));
        std::vector<AlignedPair> pairs;
        for (int i = 0; i < M; ++i) {
            Var v = ag::l2_normalize_rows(random_tokens(rng, 1, 6));
            Var s = ag::l2_normalize_rows(random_tokens(rng, 1, 6));
            pairs.push_back({v, s});
        }
        double base = itc_loss(pairs, 0.3).scalar();
        CHECK(base >= 0.0);

        std::vector<AlignedPair> shuffled = pairs;
        rng.shuffle(shuffled);
        double permuted = itc_loss(shuffled, 0.3).scalar();
        CHECK(std::abs(base - permuted) < 1e-12);
    }
}

TEST_CASE("itc gradient check") {
    Rng rng(23);
    std::vector<Var> leaves;
    std::vector<AlignedPair> pairs;
    for (int i = 0; i < 3; ++i) {
        Var v = Var::leaf(1, 5, {rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1),
                                 rng.normal(0, 1), rng.normal(0, 1)},
                          true);
        Var s = Var::leaf(1, 5, {rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1),
                                 rng.normal(0, 1), rng.normal(0, 1)},
                          true);
        leaves.push_back(v);
        leaves.push_back(s);
        pairs.push_back({v, s});
    }
    auto f = [&]() { return itc_loss(pairs, 0.4); };
    auto res = mf2::testing::grad_check(f, leaves);
    CHECK(res.max_rel_err < 1e-4);

    // Learnable-temperature route agrees with the fixed-scalar route.
    Var temp = Var::leaf(1, 1, {0.4}, true);
    auto f2 = [&]() { return itc_loss(pairs, temp); };
    CHECK(std::abs(f2().scalar() - f().scalar()) < 1e-12);
    auto res2 = mf2::testing::grad_check(f2, {temp});
    CHECK(res2.max_rel_err < 1e-4);
}

TEST_CASE("itm closed forms and errors") {
    // Confident correct predictions: logit +/- 40 saturates to p=1 / p=0.
    Var confident = Var::constant(4, 1, {40, 40, -40, -40});
    CHECK(itm_loss(confident, {1, 1, 0, 0}).scalar() < 1e-12);

    // Zero logits mean p = 0.5 everywhere: M=2 -> 2 log 2.
    Var half = Var::constant(2, 1, {0, 0});
    CHECK(std::abs(itm_loss(half, {1, 0}).scalar() - 2.0 * std::log(2.0)) < 1e-9);

    CHECK(kind_of([&] { itm_loss(half, {1, 0, 1}); }) == ErrKind::LabelMismatch);
    CHECK(kind_of([&] { itm_loss(half, {1, 2}); }) == ErrKind::NonBinary);
}

TEST_CASE("itm gradient check") {
    Rng rng(29);
    Var logits = Var::leaf(5, 1,
                           {rng.normal(0, 2), rng.normal(0, 2), rng.normal(0, 2),
                            rng.normal(0, 2), rng.normal(0, 2)},
                           true);
    auto f = [&]() { return itm_loss(logits, {1, 0, 1, 0, 0}); };
    CHECK(mf2::testing::grad_check(f, {logits}).max_rel_err < 1e-4);
}

TEST_CASE("itg closed forms and errors") {
    // Uniform logits over a 10-word vocabulary, one masked position.
    Var uniform = Var::constant(4, 10, std::vector<double>(40, 0.25));
    TokenTargets t;
    t.positions = {2};
    t.target_ids = {7};
    CHECK(std::abs(itg_loss(uniform, t).scalar() - std::log(10.0)) < 1e-9);

    // Near-one-hot logits at every target.
    std::vector<double> hot(40, -100.0);
    hot[1 * 10 + 3] = 100.0;
    hot[2 * 10 + 7] = 100.0;
    Var sharp = Var::constant(4, 10, std::move(hot));
    TokenTargets t2;
    t2.positions = {1, 2};
    t2.target_ids = {3, 7};
    CHECK(itg_loss(sharp, t2).scalar() < 1e-12);

    TokenTargets empty;
    CHECK(kind_of([&] { itg_loss(uniform, empty); }) == ErrKind::EmptyMask);
    TokenTargets cls;
    cls.positions = {0};
    cls.target_ids = {1};
    CHECK(kind_of([&] { itg_loss(uniform, cls); }) == ErrKind::InvalidArgument);
}

TEST_CASE("itg gradient check") {
    Rng rng(31);
    Var logits = random_tokens(rng, 5, 7);
    logits.set_requires_grad(true);
    TokenTargets t;
    t.positions = {1, 3, 4};
    t.target_ids = {2, 0, 6};
    auto f = [&]() { return itg_loss(logits, t); };
    CHECK(mf2::testing::grad_check(f, {logits}).max_rel_err < 1e-4);
}

TEST_CASE("negative sampling structure") {
    auto cands = sample_negatives(2, 99);
    REQUIRE(cands.size() == 6);
    int pos = 0, neg = 0;
    for (const auto& c : cands) {
        if (c.label == 1) {
            ++pos;
            CHECK(c.image_index == c.text_index);
        } else {
            ++neg;
            CHECK(c.image_index != c.text_index);
        }
    }
    CHECK(pos == 2);
    CHECK(neg == 4);

    auto again = sample_negatives(2, 99);
    for (std::size_t i = 0; i < cands.size(); ++i) {
        CHECK(cands[i].image_index == again[i].image_index);
        CHECK(cands[i].text_index == again[i].text_index);
    }
    CHECK(kind_of([] { sample_negatives(1, 0); }) == ErrKind::BatchTooSmall);

    // Never a self-pair among negatives, any batch size.
    for (int M = 2; M <= 9; ++M)
        for (const auto& c : sample_negatives(M, M * 31))
            if (c.label == 0) CHECK(c.image_index != c.text_index);
}

TEST_CASE("infer mode runs without text") {
    ag::ParamStore store;
    Rng rng(41);
    QFormer qf(store, "qf", toy_qf(), rng);
    Var visual = random_tokens(rng, 9, 16);

    QFormerOutput out = qf.forward(visual, nullptr, QFormerMode::Infer);
    CHECK(out.query_out.defined());
    CHECK(out.query_out.rows() == 4);
    CHECK(!out.text_out.defined());
    CHECK(out.query_hidden.size() == 2);  // one per block
    CHECK(out.text_hidden.empty());

    TextEmbedding text = synthetic_text(rng, 5, 16);
    CHECK(kind_of([&] { qf.forward(visual, &text, QFormerMode::Infer); }) ==
          ErrKind::InvalidArgument);
    CHECK(kind_of([&] { qf.forward(visual, nullptr, QFormerMode::Itc); }) == ErrKind::DimMismatch);
    CHECK(kind_of([&] { qformer_mode_from_string("decode"); }) == ErrKind::UnknownMode);
}

TEST_CASE("itc mask: query outputs are bit-identical under any text change") {
    ag::ParamStore store;
    Rng rng(43);
    QFormer qf(store, "qf", toy_qf(), rng);
    Var visual = random_tokens(rng, 9, 16);

    const int L = 6;
    TextEmbedding text = synthetic_text(rng, L, 16);
    QFormerOutput base = qf.forward(visual, &text, QFormerMode::Itc);
    QFormerOutput infer = qf.forward(visual, nullptr, QFormerMode::Infer);
    CHECK(base.query_out.value() == infer.query_out.value());
    // One hidden state per block on each pathway.
    CHECK(base.query_hidden.size() == 2);
    CHECK(base.text_hidden.size() == 2);

    for (int j = 0; j < L; ++j) {
        TextEmbedding perturbed = text;
        perturbed.tokens = random_tokens(rng, L, 16);
        QFormerOutput out = qf.forward(visual, &perturbed, QFormerMode::Itc);
        CHECK(out.query_out.value() == base.query_out.value());
        // The text side does change, so the probe is not vacuous.
        CHECK(out.text_out.value() != base.text_out.value());
    }
}

TEST_CASE("itg causal mask: position j only reaches positions >= j, all j, L <= 8") {
    ag::ParamStore store;
    Rng rng(47);
    QFormer qf(store, "qf", toy_qf(1, ItgStyle::Causal), rng);
    Var visual = random_tokens(rng, 5, 16);

    for (int L = 2; L <= 8; ++L) {
        TextEmbedding text = synthetic_text(rng, L, 16);
        QFormerOutput base = qf.forward(visual, &text, QFormerMode::Itg);
        for (int j = 0; j < L; ++j) {
            TextEmbedding perturbed = text;
            std::vector<double> vals = text.tokens.value();
            // Single-coordinate bump: a uniform row shift would vanish in the
            // pre-attention layer norm.
            vals[static_cast<std::size_t>(j) * 16 + (j % 16)] += 0.7;
            perturbed.tokens = Var::constant(L, 16, std::move(vals));
            QFormerOutput out = qf.forward(visual, &perturbed, QFormerMode::Itg);
            for (int r = 0; r < j; ++r)
                for (int c = 0; c < 16; ++c)
                    CHECK(out.text_out.at(r, c) == base.text_out.at(r, c));
            bool row_j_changed = false;
            for (int c = 0; c < 16; ++c)
                if (out.text_out.at(j, c) != base.text_out.at(j, c)) row_j_changed = true;
            CHECK(row_j_changed);
            // Queries never see text in generation mode.
            CHECK(out.query_out.value() == base.query_out.value());
        }
    }
}

TEST_CASE("itm mask is fully bidirectional") {
    ag::ParamStore store;
    Rng rng(53);
    QFormer qf(store, "qf", toy_qf(1), rng);
    Var visual = random_tokens(rng, 5, 16);
    TextEmbedding text = synthetic_text(rng, 4, 16);

    QFormerOutput base = qf.forward(visual, &text, QFormerMode::Itm);
    TextEmbedding perturbed = text;
    std::vector<double> vals = text.tokens.value();
    vals[5] += 1.0;
    perturbed.tokens = Var::constant(4, 16, std::move(vals));
    QFormerOutput out = qf.forward(visual, &perturbed, QFormerMode::Itm);
    // Under full visibility the queries do feel the text.
    CHECK(out.query_out.value() != base.query_out.value());
}

TEST_CASE("masked itg style lets text see both directions") {
    ag::ParamStore store;
    Rng rng(59);
    QFormer qf(store, "qf", toy_qf(1, ItgStyle::Masked), rng);
    Var visual = random_tokens(rng, 5, 16);
    const int L = 5;
    TextEmbedding text = synthetic_text(rng, L, 16);
    QFormerOutput base = qf.forward(visual, &text, QFormerMode::Itg);

    // Perturbing the last position moves an earlier position's output.
    TextEmbedding perturbed = text;
    std::vector<double> vals = text.tokens.value();
    vals[static_cast<std::size_t>(L - 1) * 16 + 2] += 0.7;
    perturbed.tokens = Var::constant(L, 16, std::move(vals));
    QFormerOutput out = qf.forward(visual, &perturbed, QFormerMode::Itg);
    bool earlier_changed = false;
    for (int c = 0; c < 16; ++c)
        if (out.text_out.at(1, c) != base.text_out.at(1, c)) earlier_changed = true;
    CHECK(earlier_changed);
    // Queries still cannot see text.
    CHECK(out.query_out.value() == base.query_out.value());
}

TEST_CASE("query and text paths use the same parameter objects") {
    ag::ParamStore store;
    Rng rng(61);
    QFormer qf(store, "qf", toy_qf(2), rng);

    // One SA and one FFN parameter set per block, no per-path duplicates.
    int sa_count = 0, ffn_count = 0;
    for (const auto& e : store.entries()) {
        if (e.name.find(".sa.wq.w") != std::string::npos) ++sa_count;
        if (e.name.find(".ffn.up.w") != std::string::npos) ++ffn_count;
    }
    CHECK(sa_count == 2);
    CHECK(ffn_count == 2);

    // The block members are the same node objects registered in the store.
    for (int b = 0; b < 2; ++b) {
        std::string prefix = "qf.block" + std::to_string(b);
        CHECK(qf.blocks()[b].ffn.up.w.node() == store.find(prefix + ".ffn.up.w").node());
        CHECK(qf.blocks()[b].sa.wq.w.node() == store.find(prefix + ".sa.wq.w").node());
    }

    // Functional coupling: scaling the shared FFN changes both paths.
    Var visual = random_tokens(rng, 5, 16);
    TextEmbedding text = synthetic_text(rng, 4, 16);
    QFormerOutput before = qf.forward(visual, &text, QFormerMode::Itm);
    for (auto& v : store.find("qf.block0.ffn.up.w").value_mut()) v *= 2.0;
    QFormerOutput after = qf.forward(visual, &text, QFormerMode::Itm);
    CHECK(before.query_out.value() != after.query_out.value());
    CHECK(before.text_out.value() != after.text_out.value());
}

TEST_CASE("projection heads emit unit-norm embeddings") {
    ag::ParamStore store;
    Rng rng(67);
    QFormer qf(store, "qf", toy_qf(1), rng);
    Var visual = random_tokens(rng, 5, 16);
    QFormerOutput out = qf.forward(visual, nullptr, QFormerMode::Infer);
    Var v = qf.project_visual(qf.pooled_queries(out));
    double norm = 0.0;
    for (double x : v.value()) norm += x * x;
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-6);
}

}  // TEST_SUITE
