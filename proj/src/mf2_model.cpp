#include "mf2/mf2_model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace mf2 {

using ag::Var;
using nlohmann::json;

double total_loss(const LossReport& report, const ModelLambdas& lambdas) {
    return report.weighted_sum(lambdas);
}

TrainingCaptions make_training_captions(const std::string& emotion_caption,
                                        const std::string& au_caption,
                                        std::optional<std::string> key_au_caption) {
    if (emotion_caption.empty()) fail(ErrKind::MissingCaption, "emotion");
    TrainingCaptions t;
    t.emotion_text = emotion_caption;
    auto sentences = split_au_caption(au_caption);  // throws MissingCaption(AU<id>)
    for (int i = 0; i < kNumAus; ++i) t.au_texts[i] = sentences[i];
    t.key_au_text = std::move(key_au_caption);
    return t;
}

namespace {

Var apply_cls_hook(const Var& tokens, const std::function<Var(const Var&)>& hook) {
    Var cls = hook(ag::slice_rows(tokens, 0, 1));
    Var rest = ag::slice_rows(tokens, 1, tokens.rows());
    return ag::concat_rows({cls, rest});
}

TokenTargets sample_itg_targets(const std::vector<int>& ids, double fraction, Rng& rng) {
    TokenTargets t;
    const int L = static_cast<int>(ids.size());
    for (int i = 1; i < L; ++i)
        if (rng.uniform01() < fraction) t.positions.push_back(i);
    if (t.positions.empty() && L > 1)
        t.positions.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(L - 1))));
    for (int p : t.positions) t.target_ids.push_back(ids[p]);
    return t;
}

}  // namespace

struct MF2Model::SamplePaths {
    const FaceSample* sample = nullptr;
    VisualFeatureMap fm;
    AURegionSet regions;
    Var emo_query_out;              // query path under the itc mask == infer path
    std::vector<Var> au_query_out;
    Var emo_pooled;                 // emotion head input [1, D]
    std::vector<Var> au_pooled;     // per-AU head inputs [1, D]
    Var emotion_logits;             // [1, 8]
    Var au_logits;                  // [1, 12]
    // Train-only state:
    TextEmbedding emo_text;
    Var emo_text_out;
    std::vector<TextEmbedding> au_texts;
    std::vector<Var> au_text_out;
};

MF2Model::MF2Model(const MF2Config& cfg, std::shared_ptr<Tokenizer> tok, ag::ParamStore::Mode mode)
    : cfg_(cfg), store_(mode), tok_(std::move(tok)) {
    if (!cfg_.emo_branch_enabled && !cfg_.au_branch_enabled)
        fail(ErrKind::InvalidArgument, "at least one branch must be enabled");
    double lam_sum = cfg_.lambdas.itc + cfg_.lambdas.itm + cfg_.lambdas.itg + cfg_.lambdas.ce_au +
                     cfg_.lambdas.ce_emo;
    if (cfg_.lambdas.itc < 0 || cfg_.lambdas.itm < 0 || cfg_.lambdas.itg < 0 ||
        cfg_.lambdas.ce_au < 0 || cfg_.lambdas.ce_emo < 0 || lam_sum == 0.0)
        fail(ErrKind::InvalidArgument, "loss weights must be >= 0 with at least one nonzero");

    EncoderConfig enc = cfg_.encoders;
    if (cfg_.vocab_size == 0) {
        if (!tok_) fail(ErrKind::InvalidArgument, "tokenizer required unless vocab_size is set");
        cfg_.vocab_size = tok_->vocab_size();
    }

    Rng rng(cfg_.seed ^ 0x6d6632ULL);
    vis_ = std::make_unique<VisualEncoder>(store_, enc, rng);
    txt_ = std::make_unique<TextEncoder>(store_, enc, tok_, rng, cfg_.vocab_size);
    // A disabled branch contributes no parameters at all.
    if (cfg_.emo_branch_enabled) {
        qf_emo_ = QFormer(store_, "emo_qf", cfg_.qformer_emo, rng);
        emo_itg_bias_ = store_.add_zeros("emo_qf.itg_bias", 1, cfg_.vocab_size);
    }
    if (cfg_.au_branch_enabled) {
        qf_au_ = QFormer(store_, "au_qf", cfg_.qformer_au, rng);
        au_itg_bias_ = store_.add_zeros("au_qf.itg_bias", 1, cfg_.vocab_size);
    }

    const int d = enc.embed_dim;
    emo_head_ = nn::Linear(store_, "head.emo", d, kNumEmotions, rng);
    for (int i = 0; i < kNumAus; ++i)
        au_heads_.emplace_back(store_, "head.au" + std::to_string(au_ids()[i]), d, 1, rng);

    au_map_ = enc.au_map_path.empty() ? default_au_landmark_map()
                                      : load_au_landmark_map(enc.au_map_path);

    if (cfg_.freeze_encoders && mode == ag::ParamStore::Mode::Materialize) {
        store_.set_requires_grad(
            [](const ag::ParamStore::Entry& e) {
                return e.name.rfind("vis.", 0) == 0 || e.name.rfind("txt.", 0) == 0;
            },
            false);
    }
}

void MF2Model::install_dfn_hooks(DfnHooks hooks, std::string dfn_config_json) {
    if (hooks_) fail(ErrKind::AlreadyAttached, "fine-tuning network already attached");
    hooks_ = std::move(hooks);
    dfn_config_json_ = std::move(dfn_config_json);
}

void MF2Model::reinit_heads(std::uint64_t seed) {
    Rng rng(seed ^ 0x68656164ULL);
    for (auto& e : const_cast<std::vector<ag::ParamStore::Entry>&>(store_.entries())) {
        if (e.name.rfind("head.", 0) != 0 || !e.var.defined()) continue;
        bool is_bias = e.name.size() > 2 && e.name.substr(e.name.size() - 2) == ".b";
        for (auto& v : e.var.value_mut()) v = is_bias ? 0.0 : rng.normal(0.0, 0.02);
    }
}

MF2Model::SamplePaths MF2Model::infer_paths(const FaceSample& sample) const {
    if (!sample.pixels)
        fail(ErrKind::InvalidArgument, "sample " + sample.sample_id + " has no pixels loaded");
    if (static_cast<int>(sample.landmarks.size()) != kNumLandmarks)
        fail(ErrKind::ShapeMismatch, "sample needs 68 landmarks");

    SamplePaths p;
    p.sample = &sample;
    p.fm = vis_->encode(*sample.pixels);
    if (hooks_ && hooks_->vis_cls) p.fm.tokens = apply_cls_hook(p.fm.tokens, hooks_->vis_cls);

    const SideTap* emo_tap = hooks_ ? hooks_->emo_query.get() : nullptr;
    const SideTap* au_tap = hooks_ ? hooks_->au_query.get() : nullptr;

    if (cfg_.emo_branch_enabled) {
        QFormerOutput out = qf_emo_.forward(p.fm.tokens, nullptr, QFormerMode::Infer, emo_tap);
        p.emo_query_out = out.query_out;
    }
    if (cfg_.au_branch_enabled) {
        p.regions = extract_au_regions(p.fm, sample.landmarks, au_map_, cfg_.encoders.region_k);
        for (int i = 0; i < kNumAus; ++i) {
            QFormerOutput out =
                qf_au_.forward(p.regions.regions[i], nullptr, QFormerMode::Infer, au_tap);
            p.au_query_out.push_back(out.query_out);
        }
    }
    finish_heads(p);
    return p;
}

void MF2Model::finish_heads(SamplePaths& p) const {
    if (cfg_.au_branch_enabled) {
        p.au_pooled.clear();
        for (int i = 0; i < kNumAus; ++i) p.au_pooled.push_back(ag::mean_rows(p.au_query_out[i]));
    }
    if (cfg_.emo_branch_enabled) {
        p.emo_pooled = ag::mean_rows(p.emo_query_out);
    } else {
        // Global branch ablated: the emotion head reads the mean of the local
        // pooled features instead.
        p.emo_pooled = ag::mean_rows(ag::concat_rows(p.au_pooled));
    }
    p.emotion_logits = emo_head_(p.emo_pooled);
    std::vector<Var> au_logits;
    for (int i = 0; i < kNumAus; ++i) {
        const Var& head_in = cfg_.au_branch_enabled ? p.au_pooled[i] : p.emo_pooled;
        au_logits.push_back(au_heads_[i](head_in));
    }
    p.au_logits = ag::concat_cols(au_logits);
}

MF2Output MF2Model::paths_to_output(const SamplePaths& p) const {
    MF2Output out;
    out.emotion_logits = p.emotion_logits.value();
    out.au_logits = p.au_logits.value();
    if (cfg_.emo_branch_enabled)
        out.emo_visual_embed = qf_emo_.project_visual(p.emo_pooled).value();
    if (p.emo_text_out.defined())
        out.emo_text_embed = qf_emo_.project_text_cls(p.emo_text_out).value();
    for (std::size_t i = 0; i < p.au_pooled.size(); ++i) {
        out.au_visual_embeds.push_back(qf_au_.project_visual(p.au_pooled[i]).value());
        if (i < p.au_text_out.size() && p.au_text_out[i].defined())
            out.au_text_embeds.push_back(qf_au_.project_text_cls(p.au_text_out[i]).value());
    }
    return out;
}

MF2Output MF2Model::forward_infer(const FaceSample& sample) const {
    SamplePaths p = infer_paths(sample);
    return paths_to_output(p);
}

std::vector<MF2Output> MF2Model::forward_infer_batch(
    const std::vector<const FaceSample*>& batch) const {
    std::vector<MF2Output> out;
    out.reserve(batch.size());
    for (const FaceSample* s : batch) out.push_back(forward_infer(*s));
    return out;
}

std::vector<double> MF2Model::au_logits_from_regions(const std::vector<ag::Var>& regions) const {
    if (regions.size() != kNumAus)
        fail(ErrKind::DimMismatch, "expected one region per AU");
    const SideTap* au_tap = hooks_ ? hooks_->au_query.get() : nullptr;
    std::vector<double> logits;
    for (int i = 0; i < kNumAus; ++i) {
        QFormerOutput out = qf_au_.forward(regions[i], nullptr, QFormerMode::Infer, au_tap);
        logits.push_back(au_heads_[i](ag::mean_rows(out.query_out)).scalar());
    }
    return logits;
}

MF2Model::TrainResult MF2Model::forward_train(const FaceSample& sample,
                                              const TrainingCaptions& captions,
                                              std::uint64_t step_seed) {
    return forward_train_batch({TrainItem{&sample, &captions}}, step_seed);
}

MF2Model::TrainResult MF2Model::forward_train_batch(const std::vector<TrainItem>& batch,
                                                    std::uint64_t step_seed) {
    if (batch.empty()) fail(ErrKind::InvalidArgument, "empty training batch");
    const int B = static_cast<int>(batch.size());
    const auto& lam = cfg_.lambdas;
    const bool align = (lam.itc > 0 || lam.itm > 0 || lam.itg > 0);

    for (const auto& item : batch) {
        if (!item.sample || !item.captions) fail(ErrKind::InvalidArgument, "null batch item");
        if (!item.sample->fully_labeled())
            fail(ErrKind::UnlabeledSample, item.sample->sample_id);
        if (align) {
            if (cfg_.emo_branch_enabled && item.captions->emotion_text.empty())
                fail(ErrKind::MissingCaption, "emotion");
            for (int i = 0; i < kNumAus; ++i)
                if (cfg_.au_branch_enabled && item.captions->au_texts[i].empty())
                    fail(ErrKind::MissingCaption, "AU" + std::to_string(au_ids()[i]));
        }
    }

    const SideTap* emo_qtap = hooks_ ? hooks_->emo_query.get() : nullptr;
    const SideTap* emo_ttap = hooks_ ? hooks_->emo_text.get() : nullptr;
    const SideTap* au_qtap = hooks_ ? hooks_->au_query.get() : nullptr;
    const SideTap* au_ttap = hooks_ ? hooks_->au_text.get() : nullptr;


    std::vector<SamplePaths> paths(B);
    // Visual features and per-sample text encodings.
    for (int b = 0; b < B; ++b) {
        SamplePaths& p = paths[b];
        const FaceSample& s = *batch[b].sample;
        const TrainingCaptions& caps = *batch[b].captions;
        if (!s.pixels) fail(ErrKind::InvalidArgument, "sample without pixels: " + s.sample_id);
        p.sample = &s;
        p.fm = vis_->encode(*s.pixels);
        if (hooks_ && hooks_->vis_cls) p.fm.tokens = apply_cls_hook(p.fm.tokens, hooks_->vis_cls);

        if (cfg_.emo_branch_enabled && align) {
            const std::string& text = (cfg_.use_key_au_for_emo && caps.key_au_text)
                                          ? *caps.key_au_text
                                          : caps.emotion_text;
            CaptionType ct = (cfg_.use_key_au_for_emo && caps.key_au_text) ? CaptionType::KeyAu
                                                                           : CaptionType::Emotion;
            p.emo_text = txt_->encode(text, ct);
            if (hooks_ && hooks_->txt_cls)
                p.emo_text.tokens = apply_cls_hook(p.emo_text.tokens, hooks_->txt_cls);
        }
        if (cfg_.au_branch_enabled && align) {
            for (int i = 0; i < kNumAus; ++i) {
                TextEmbedding e = txt_->encode(caps.au_texts[i], CaptionType::Au);
                if (hooks_ && hooks_->txt_cls)
                    e.tokens = apply_cls_hook(e.tokens, hooks_->txt_cls);
                p.au_texts.push_back(std::move(e));
            }
        }
    }

    // Query paths. Under the contrastive mask the query half never sees text,
    // so it doubles as the head input path and matches inference bit for bit.
    for (int b = 0; b < B; ++b) {
        SamplePaths& p = paths[b];
        if (cfg_.emo_branch_enabled) {
            if (align && lam.itc > 0) {
                QFormerOutput out =
                    qf_emo_.forward(p.fm.tokens, &p.emo_text, QFormerMode::Itc, emo_qtap, emo_ttap);
                p.emo_query_out = out.query_out;
                p.emo_text_out = out.text_out;
            } else {
                p.emo_query_out =
                    qf_emo_.forward(p.fm.tokens, nullptr, QFormerMode::Infer, emo_qtap).query_out;
            }
        }
        if (cfg_.au_branch_enabled) {
            p.regions = extract_au_regions(p.fm, p.sample->landmarks, au_map_, cfg_.encoders.region_k);
            for (int i = 0; i < kNumAus; ++i) {
                if (align && lam.itc > 0) {
                    QFormerOutput out = qf_au_.forward(p.regions.regions[i], &p.au_texts[i],
                                                       QFormerMode::Itc, au_qtap, au_ttap);
                    p.au_query_out.push_back(out.query_out);
                    p.au_text_out.push_back(out.text_out);
                } else {
                    p.au_query_out.push_back(
                        qf_au_.forward(p.regions.regions[i], nullptr, QFormerMode::Infer, au_qtap)
                            .query_out);
                }
            }
        }
        finish_heads(p);
    }

    LossReport report;
    std::vector<Var> loss_terms;  // weighted Vars summed into the total

    // ---- cross-entropy heads ----
    {
        std::vector<Var> ce_emo_terms, ce_au_terms;
        for (int b = 0; b < B; ++b) {
            const SamplePaths& p = paths[b];
            ce_emo_terms.push_back(ag::nll_rows(p.emotion_logits, {*p.sample->emotion}));
            std::vector<double> au_y(kNumAus);
            for (int i = 0; i < kNumAus; ++i) au_y[i] = (*p.sample->au_labels)[i];
            ce_au_terms.push_back(ag::scale(ag::bce_with_logits(p.au_logits, au_y), 1.0 / kNumAus));
        }
        Var ce_emo = ag::scale(ag::sum_scalars(ce_emo_terms), 1.0 / B);
        Var ce_au = ag::scale(ag::sum_scalars(ce_au_terms), 1.0 / B);
        report.ce_emo = ce_emo.scalar();
        report.ce_au = ce_au.scalar();
        if (lam.ce_emo > 0) loss_terms.push_back(ag::scale(ce_emo, lam.ce_emo));
        if (lam.ce_au > 0) loss_terms.push_back(ag::scale(ce_au, lam.ce_au));
    }

    // ---- global branch alignment ----
    if (cfg_.emo_branch_enabled && align) {
        if (lam.itc > 0) {
            std::vector<AlignedPair> pairs;
            for (int b = 0; b < B; ++b) {
                pairs.push_back({qf_emo_.project_visual(ag::mean_rows(paths[b].emo_query_out)),
                                 qf_emo_.project_text_cls(paths[b].emo_text_out)});
            }
            Var l = qf_emo_.temperature_is_learnable()
                        ? itc_loss(pairs, qf_emo_.temperature_param())
                        : itc_loss(pairs, qf_emo_.config().temperature);
            report.emo_itc = l.scalar();
            loss_terms.push_back(ag::scale(l, lam.itc));
        }
        if (lam.itm > 0) {
            // Candidate pairs re-run the stack under full visibility.
            std::vector<MatchCandidate> cands =
                B >= 2 ? sample_negatives(B, cfg_.qformer_emo.negatives_seed ^ step_seed)
                       : std::vector<MatchCandidate>{{0, 0, 1}};
            std::vector<Var> logits;
            std::vector<int> labels;
            for (const auto& c : cands) {
                QFormerOutput joint = qf_emo_.forward(paths[c.image_index].fm.tokens,
                                                      &paths[c.text_index].emo_text,
                                                      QFormerMode::Itm, emo_qtap, emo_ttap);
                logits.push_back(qf_emo_.itm_logit(joint));
                labels.push_back(c.label);
            }
            Var l = itm_loss(ag::concat_rows(logits), labels);
            report.emo_itm = l.scalar();
            loss_terms.push_back(ag::scale(l, lam.itm));
        }
        if (lam.itg > 0) {
            std::vector<Var> terms;
            for (int b = 0; b < B; ++b) {
                terms.push_back(branch_itg(qf_emo_, paths[b].fm.tokens, paths[b].emo_text,
                                           emo_itg_bias_, step_seed, emo_qtap, emo_ttap));
            }
            Var l = ag::scale(ag::sum_scalars(terms), 1.0 / B);
            report.emo_itg = l.scalar();
            loss_terms.push_back(ag::scale(l, lam.itg));
        }
    }

    // ---- local branch alignment (shared weights across AUs) ----
    if (cfg_.au_branch_enabled && align) {
        std::vector<Var> itc_terms, itm_terms, itg_terms;
        for (int b = 0; b < B; ++b) {
            SamplePaths& p = paths[b];
            if (lam.itc > 0) {
                std::vector<AlignedPair> pairs;
                for (int i = 0; i < kNumAus; ++i)
                    pairs.push_back({qf_au_.project_visual(ag::mean_rows(p.au_query_out[i])),
                                     qf_au_.project_text_cls(p.au_text_out[i])});
                // Per-AU view of the in-batch objective: row + column terms of
                // the similarity matrix, each scaled by 1/(2M).
                std::vector<Var> v, s;
                for (auto& pr : pairs) {
                    v.push_back(pr.visual_embed);
                    s.push_back(pr.text_embed);
                }
                Var sims = ag::matmul(ag::concat_rows(v), ag::transpose(ag::concat_rows(s)));
                sims = qf_au_.temperature_is_learnable()
                           ? ag::mul_scalar_var(sims, ag::reciprocal(qf_au_.temperature_param()))
                           : ag::scale(sims, 1.0 / qf_au_.config().temperature);
                Var sims_t = ag::transpose(sims);
                std::vector<Var> au_terms;
                for (int i = 0; i < kNumAus; ++i) {
                    Var row = ag::gather_rows(sims, {i});
                    Var col = ag::gather_rows(sims_t, {i});
                    Var term = ag::scale(
                        ag::add(ag::nll_rows(row, {i}), ag::nll_rows(col, {i})),
                        1.0 / (2.0 * kNumAus));
                    report.per_au_itc[i] += term.scalar() / B;
                    au_terms.push_back(term);
                }
                itc_terms.push_back(ag::sum_scalars(au_terms));
            }
            if (lam.itm > 0) {
                auto cands = sample_negatives(
                    kNumAus, cfg_.qformer_au.negatives_seed ^ step_seed ^ fnv1a64(p.sample->sample_id));
                std::vector<Var> per_au_logits[kNumAus];
                std::vector<int> per_au_labels[kNumAus];
                for (std::size_t ci = 0; ci < cands.size(); ++ci) {
                    const auto& c = cands[ci];
                    int owner = static_cast<int>(ci / 3);  // emitted in triples per AU
                    QFormerOutput joint =
                        qf_au_.forward(p.regions.regions[c.image_index], &p.au_texts[c.text_index],
                                       QFormerMode::Itm, au_qtap, au_ttap);
                    per_au_logits[owner].push_back(qf_au_.itm_logit(joint));
                    per_au_labels[owner].push_back(c.label);
                }
                std::vector<Var> au_terms;
                for (int i = 0; i < kNumAus; ++i) {
                    Var l = itm_loss(ag::concat_rows(per_au_logits[i]), per_au_labels[i]);
                    report.per_au_itm[i] += l.scalar() / B;
                    au_terms.push_back(l);
                }
                itm_terms.push_back(ag::scale(ag::sum_scalars(au_terms), 1.0 / kNumAus));
            }
            if (lam.itg > 0) {
                std::vector<Var> au_terms;
                for (int i = 0; i < kNumAus; ++i) {
                    Var l = branch_itg(qf_au_, p.regions.regions[i], p.au_texts[i], au_itg_bias_,
                                       step_seed, au_qtap, au_ttap);
                    report.per_au_itg[i] += l.scalar() / B;
                    au_terms.push_back(l);
                }
                itg_terms.push_back(ag::scale(ag::sum_scalars(au_terms), 1.0 / kNumAus));
            }
        }
        if (!itc_terms.empty()) {
            Var l = ag::scale(ag::sum_scalars(itc_terms), 1.0 / B);
            report.au_itc = l.scalar();
            loss_terms.push_back(ag::scale(l, lam.itc));
        }
        if (!itm_terms.empty()) {
            Var l = ag::scale(ag::sum_scalars(itm_terms), 1.0 / B);
            report.au_itm = l.scalar();
            loss_terms.push_back(ag::scale(l, lam.itm));
        }
        if (!itg_terms.empty()) {
            Var l = ag::scale(ag::sum_scalars(itg_terms), 1.0 / B);
            report.au_itg = l.scalar();
            loss_terms.push_back(ag::scale(l, lam.itg));
        }
    }

    TrainResult result;
    result.loss = ag::sum_scalars(loss_terms);
    report.total = result.loss.scalar();
    result.report = report;
    for (int b = 0; b < B; ++b) result.outputs.push_back(paths_to_output(paths[b]));
    return result;
}

Var MF2Model::branch_itg(const QFormer& qf, const Var& visual_tokens, const TextEmbedding& text,
                         const Var& itg_bias, std::uint64_t step_seed, const SideTap* qtap,
                         const SideTap* ttap) const {
    if (qf.config().itg_style == ItgStyle::Masked) {
        // Mask choice is a pure function of (caption ids, step seed) so equal
        // captions get equal generation losses regardless of batch position.
        std::string id_bytes(reinterpret_cast<const char*>(text.ids.data()),
                             text.ids.size() * sizeof(int));
        Rng mask_rng(step_seed ^ 0x697467ULL ^ fnv1a64(id_bytes));
        TokenTargets targets = sample_itg_targets(text.ids, cfg_.itg_mask_fraction, mask_rng);
        std::vector<int> masked_ids = text.ids;
        for (int pos : targets.positions) masked_ids[pos] = Tokenizer::kMaskId;
        TextEmbedding masked = txt_->encode_ids(masked_ids);
        if (hooks_ && hooks_->txt_cls) masked.tokens = apply_cls_hook(masked.tokens, hooks_->txt_cls);
        QFormerOutput out = qf.forward(visual_tokens, &masked, QFormerMode::Itg, qtap, ttap);
        Var logits = ag::add_rowvec(ag::matmul(out.text_out, ag::transpose(txt_->token_table())),
                                    itg_bias);
        return itg_loss(logits, targets);
    }
    // Causal style: autoregressive next-token prediction over the caption.
    QFormerOutput out = qf.forward(visual_tokens, &text, QFormerMode::Itg, qtap, ttap);
    const int L = static_cast<int>(text.ids.size());
    if (L < 2) fail(ErrKind::EmptyMask, "caption too short for generation loss");
    Var logits = ag::add_rowvec(ag::matmul(ag::slice_rows(out.text_out, 0, L - 1),
                                           ag::transpose(txt_->token_table())),
                                itg_bias);
    std::vector<int> targets(text.ids.begin() + 1, text.ids.end());
    return ag::nll_rows(logits, targets);
}

// ---------------------------------------------------------------------------

namespace {

json lambdas_to_json(const ModelLambdas& l) {
    return json{{"itc", l.itc}, {"itm", l.itm}, {"itg", l.itg}, {"ce_au", l.ce_au},
                {"ce_emo", l.ce_emo}};
}

ModelLambdas lambdas_from_json(const json& j) {
    ModelLambdas l;
    l.itc = j.at("itc").get<double>();
    l.itm = j.at("itm").get<double>();
    l.itg = j.at("itg").get<double>();
    l.ce_au = j.at("ce_au").get<double>();
    l.ce_emo = j.at("ce_emo").get<double>();
    return l;
}

json encoder_to_json(const EncoderConfig& e) {
    return json{{"image_size", e.image_size}, {"patch_size", e.patch_size},
                {"embed_dim", e.embed_dim},   {"n_heads", e.n_heads},
                {"ffn_dim", e.ffn_dim},       {"vit_depth", e.vit_depth},
                {"text_depth", e.text_depth}, {"region_k", e.region_k},
                {"max_text_len", e.max_text_len}, {"key_au_budget", e.key_au_budget},
                {"au_map_path", e.au_map_path}};
}

EncoderConfig encoder_from_json(const json& j) {
    EncoderConfig e;
    e.image_size = j.at("image_size").get<int>();
    e.patch_size = j.at("patch_size").get<int>();
    e.embed_dim = j.at("embed_dim").get<int>();
    e.n_heads = j.at("n_heads").get<int>();
    e.ffn_dim = j.at("ffn_dim").get<int>();
    e.vit_depth = j.at("vit_depth").get<int>();
    e.text_depth = j.at("text_depth").get<int>();
    e.region_k = j.at("region_k").get<int>();
    e.max_text_len = j.at("max_text_len").get<int>();
    e.key_au_budget = j.at("key_au_budget").get<int>();
    e.au_map_path = j.value("au_map_path", std::string());
    return e;
}

json qformer_to_json(const QFormerConfig& q) {
    return json{{"n_blocks", q.n_blocks},     {"n_queries", q.n_queries},
                {"embed_dim", q.embed_dim},   {"n_heads", q.n_heads},
                {"ffn_dim", q.ffn_dim},       {"temperature", q.temperature},
                {"learnable_temperature", q.learnable_temperature},
                {"itg_style", q.itg_style == ItgStyle::Masked ? "masked" : "causal"},
                {"d_proj", q.d_proj},         {"negatives_seed", q.negatives_seed}};
}

QFormerConfig qformer_from_json(const json& j) {
    QFormerConfig q;
    q.n_blocks = j.at("n_blocks").get<int>();
    q.n_queries = j.at("n_queries").get<int>();
    q.embed_dim = j.at("embed_dim").get<int>();
    q.n_heads = j.at("n_heads").get<int>();
    q.ffn_dim = j.at("ffn_dim").get<int>();
    q.temperature = j.at("temperature").get<double>();
    q.learnable_temperature = j.at("learnable_temperature").get<bool>();
    q.itg_style = itg_style_from_string(j.at("itg_style").get<std::string>());
    q.d_proj = j.at("d_proj").get<int>();
    q.negatives_seed = j.at("negatives_seed").get<std::uint64_t>();
    return q;
}

}  // namespace

std::string mf2_config_to_json(const MF2Config& cfg) {
    json j;
    j["encoders"] = encoder_to_json(cfg.encoders);
    j["qformer_emo"] = qformer_to_json(cfg.qformer_emo);
    j["qformer_au"] = qformer_to_json(cfg.qformer_au);
    j["lambdas"] = lambdas_to_json(cfg.lambdas);
    j["use_key_au_for_emo"] = cfg.use_key_au_for_emo;
    j["freeze_encoders"] = cfg.freeze_encoders;
    j["emo_branch_enabled"] = cfg.emo_branch_enabled;
    j["au_branch_enabled"] = cfg.au_branch_enabled;
    j["itg_mask_fraction"] = cfg.itg_mask_fraction;
    j["vocab_size"] = cfg.vocab_size;
    j["seed"] = cfg.seed;
    return j.dump();
}

MF2Config mf2_config_from_json(const std::string& text) {
    json j = json::parse(text);
    MF2Config cfg;
    cfg.encoders = encoder_from_json(j.at("encoders"));
    cfg.qformer_emo = qformer_from_json(j.at("qformer_emo"));
    cfg.qformer_au = qformer_from_json(j.at("qformer_au"));
    cfg.lambdas = lambdas_from_json(j.at("lambdas"));
    cfg.use_key_au_for_emo = j.at("use_key_au_for_emo").get<bool>();
    cfg.freeze_encoders = j.at("freeze_encoders").get<bool>();
    cfg.emo_branch_enabled = j.at("emo_branch_enabled").get<bool>();
    cfg.au_branch_enabled = j.at("au_branch_enabled").get<bool>();
    cfg.itg_mask_fraction = j.at("itg_mask_fraction").get<double>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

void MF2Model::save_checkpoint(const std::string& path) const {
    json j;
    j["format"] = "mf2-checkpoint-v1";
    j["config"] = json::parse(mf2_config_to_json(cfg_));
    j["vocab"] = tok_ ? tok_->words() : std::vector<std::string>{};
    if (!dfn_config_json_.empty()) j["dfn_config"] = json::parse(dfn_config_json_);
    json tensors = json::object();
    for (const auto& e : store_.entries()) {
        if (!e.var.defined()) continue;
        json t;
        t["rows"] = e.rows;
        t["cols"] = e.cols;
        t["data"] = e.var.value();
        t["trainable"] = e.var.requires_grad();
        tensors[e.name] = std::move(t);
    }
    j["tensors"] = std::move(tensors);
    write_text_file(path, j.dump());
}

void MF2Model::load_checkpoint(const std::string& path, bool strict) {
    json j = json::parse(read_text_file(path));
    const json& tensors = j.at("tensors");
    if (strict) {
        for (const auto& e : store_.entries())
            if (!tensors.contains(e.name))
                fail(ErrKind::ConfigMismatch, "checkpoint missing tensor " + e.name);
        for (auto it = tensors.begin(); it != tensors.end(); ++it) {
            bool known = false;
            for (const auto& e : store_.entries())
                if (e.name == it.key()) known = true;
            if (!known) fail(ErrKind::ConfigMismatch, "unexpected tensor " + it.key());
        }
    }
    for (auto& e : const_cast<std::vector<ag::ParamStore::Entry>&>(store_.entries())) {
        if (!tensors.contains(e.name) || !e.var.defined()) continue;
        const json& t = tensors.at(e.name);
        if (t.at("rows").get<int>() != e.rows || t.at("cols").get<int>() != e.cols)
            fail(ErrKind::ConfigMismatch, "shape mismatch for " + e.name);
        auto data = t.at("data").get<std::vector<double>>();
        e.var.value_mut() = std::move(data);
    }
}

MF2Model MF2Model::from_checkpoint(const std::string& path) {
    json j = json::parse(read_text_file(path));
    MF2Config cfg = mf2_config_from_json(j.at("config").dump());
    auto vocab = j.at("vocab").get<std::vector<std::string>>();
    auto tok = std::make_shared<Tokenizer>(Tokenizer::from_words(std::move(vocab)));
    MF2Model model(cfg, tok);
    model.load_checkpoint(path, true);
    return model;
}

}  // namespace mf2
