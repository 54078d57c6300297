#include "mf2/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numeric>
#include <sstream>

namespace mf2 {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

TrainData make_train_data(DatasetManifest train, DatasetManifest val,
                          const std::vector<CaptionRecord>& records) {
    TrainData data;
    data.train = std::move(train);
    data.val = std::move(val);

    std::map<std::string, std::map<CaptionType, std::string>> by_sample;
    for (const auto& r : records) by_sample[r.sample_id][r.caption_type] = r.text;
    for (auto& [sid, texts] : by_sample) {
        auto emo = texts.find(CaptionType::Emotion);
        auto au = texts.find(CaptionType::Au);
        if (emo == texts.end() || au == texts.end()) continue;  // eval-only sample
        std::optional<std::string> key;
        if (auto k = texts.find(CaptionType::KeyAu); k != texts.end()) key = k->second;
        data.captions[sid] = make_training_captions(emo->second, au->second, std::move(key));
    }

    std::string bytes = serialize_manifest(data.train) + "\x1e" + serialize_manifest(data.val) +
                        "\x1e" + serialize_captions(records);
    data.input_hash = sha256_hex(bytes);
    return data;
}

std::shared_ptr<Tokenizer> tokenizer_from_captions(const std::vector<CaptionRecord>& records) {
    std::vector<std::string> texts;
    texts.reserve(records.size());
    for (const auto& r : records) texts.push_back(r.text);
    return std::make_shared<Tokenizer>(Tokenizer::build_from_corpus(texts));
}

MF2Model load_model_checkpoint(const std::string& path) {
    json j = json::parse(read_text_file(path));
    MF2Config cfg = mf2_config_from_json(j.at("config").dump());
    auto vocab = j.at("vocab").get<std::vector<std::string>>();
    auto tok = std::make_shared<Tokenizer>(Tokenizer::from_words(std::move(vocab)));
    MF2Model model(cfg, tok);
    if (j.contains("dfn_config")) attach_dfn(model, dfn_config_from_json(j["dfn_config"].dump()));
    model.load_checkpoint(path, true);
    return model;
}

void RunRecord::finalize_hash() {
    // Output locations are not content: two runs of the same config and seed
    // into different run directories must hash identically.
    std::string config_for_hash = config_echo;
    json parsed = json::parse(config_echo, nullptr, false);
    if (!parsed.is_discarded() && parsed.is_object()) {
        parsed.erase("run_dir");
        config_for_hash = parsed.dump();
    }
    std::ostringstream ss;
    ss << config_for_hash << "\x1e" << input_hash << "\x1e";
    for (const auto& [id, f1] : metrics.per_au_f1) ss << id << ":" << f1 << ",";
    ss << metrics.au_macro_f1 << "\x1e";
    for (const auto& [name, acc] : metrics.per_emotion_acc) ss << name << ":" << acc << ",";
    ss << metrics.emotion_macro_acc << "\x1e" << metrics.trainable_params << "\x1e";
    for (double l : epoch_losses) ss << l << ",";
    ss << "\x1e" << aborted_nan;
    content_hash = sha256_hex(ss.str());
}

std::string RunRecord::to_json() const {
    json j;
    j["config"] = json::parse(config_echo.empty() ? "{}" : config_echo);
    j["input_hash"] = input_hash;
    j["metrics"] = json::parse(metrics.to_json());
    j["epoch_losses"] = epoch_losses;
    json reports = json::array();
    for (const auto& r : epoch_reports) {
        reports.push_back({{"emo_itc", r.emo_itc},
                           {"emo_itm", r.emo_itm},
                           {"emo_itg", r.emo_itg},
                           {"au_itc", r.au_itc},
                           {"au_itm", r.au_itm},
                           {"au_itg", r.au_itg},
                           {"ce_au", r.ce_au},
                           {"ce_emo", r.ce_emo},
                           {"total", r.total}});
    }
    j["epoch_reports"] = std::move(reports);
    j["timings"] = timings;
    j["checkpoint_path"] = checkpoint_path;
    j["aborted_nan"] = aborted_nan;
    j["content_hash"] = content_hash;
    return j.dump(2);
}

MetricsReport evaluate_model(const MF2Model& model, const DatasetManifest& split) {
    const std::uint64_t text_calls_before = model.text_encoder().call_count();
    auto t0 = Clock::now();

    std::vector<AuVector> au_preds, au_gts;
    std::vector<int> emo_preds, emo_gts;
    for (const auto& sample : split.samples) {
        MF2Output out = model.forward_infer(sample);
        AuVector pred{};
        for (int i = 0; i < kNumAus; ++i) pred[i] = out.au_logits[i] > 0.0 ? 1 : 0;
        if (sample.au_labels) {
            au_preds.push_back(pred);
            au_gts.push_back(*sample.au_labels);
        }
        if (sample.emotion) {
            int arg = 0;
            for (int c = 1; c < kNumEmotions; ++c)
                if (out.emotion_logits[c] > out.emotion_logits[arg]) arg = c;
            emo_preds.push_back(arg);
            emo_gts.push_back(*sample.emotion);
        }
    }

    MetricsReport report;
    if (!au_preds.empty()) {
        auto [per_au, macro] = f1_per_au(au_preds, au_gts);
        report.per_au_f1 = std::move(per_au);
        report.au_macro_f1 = macro;
    }
    if (!emo_preds.empty()) {
        auto [per_class, macro] = accuracy_per_class(emo_preds, emo_gts);
        report.per_emotion_acc = std::move(per_class);
        report.emotion_macro_acc = macro;
    }
    report.infer_time_per_epoch = seconds_since(t0);

    if (model.text_encoder().call_count() != text_calls_before)
        fail(ErrKind::InvalidArgument, "text encoder was touched during evaluation");
    return report;
}

long effective_warmup_steps(const TrainSchedule& sched, int n_train_samples) {
    const int batch_size = std::max(1, std::min(sched.batch_size, n_train_samples));
    const int steps_per_epoch = (n_train_samples + batch_size - 1) / batch_size;
    const long total_steps = static_cast<long>(steps_per_epoch) * sched.epochs;
    return std::min<long>(sched.warmup_steps, std::max<long>(1, total_steps / 10));
}

RunRecord train_model(MF2Model& model, const TrainData& data, const TrainSchedule& sched,
                      std::uint64_t seed, const std::string& config_echo,
                      const std::string& run_dir) {
    if (data.train.samples.empty()) fail(ErrKind::InvalidArgument, "empty training split");
    const int n = static_cast<int>(data.train.samples.size());
    const int batch_size = std::max(1, std::min(sched.batch_size, n));
    const long warmup = effective_warmup_steps(sched, n);

    const bool align = model.config().lambdas.itc > 0 || model.config().lambdas.itm > 0 ||
                       model.config().lambdas.itg > 0;
    for (const auto& s : data.train.samples) {
        if (align && !data.captions.count(s.sample_id))
            fail(ErrKind::MissingCaption, "no captions for sample " + s.sample_id);
    }

    const DatasetManifest& eval_split = data.val.samples.empty() ? data.train : data.val;
    const bool track_emotion = model.config().lambdas.ce_emo > 0;

    RunRecord record;
    record.config_echo = config_echo;
    record.input_hash = data.input_hash;

    AdamW opt({sched.lr, 0.9, 0.999, 1e-8, sched.weight_decay});
    Rng shuffle_rng(seed ^ 0x747261696eULL);
    long step = 0;
    double best_macro = -1.0;
    double train_time_total = 0.0;
    std::string best_path = run_dir.empty() ? "" : run_dir + "/best.ckpt.json";
    std::string last_path = run_dir.empty() ? "" : run_dir + "/last.ckpt.json";

    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir);
        model.save_checkpoint(last_path);  // last good state, step 0
    }

    for (int epoch = 0; epoch < sched.epochs; ++epoch) {
        auto t0 = Clock::now();
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        LossReport epoch_report;
        int batches = 0;
        bool aborted = false;
        for (int start = 0; start < n; start += batch_size) {
            std::vector<MF2Model::TrainItem> items;
            for (int k = start; k < std::min(n, start + batch_size); ++k) {
                const FaceSample& s = data.train.samples[order[k]];
                static const TrainingCaptions empty_captions{};
                const TrainingCaptions* caps =
                    data.captions.count(s.sample_id) ? &data.captions.at(s.sample_id)
                                                     : &empty_captions;
                items.push_back({&s, caps});
            }
            auto result = model.forward_train_batch(items, seed ^ (0x9e37ULL * (step + 1)));
            if (!std::isfinite(result.report.total)) {
                record.aborted_nan = true;
                aborted = true;
                break;
            }
            ag::backward(result.loss);
            ++step;
            opt.step(model.params(), warmup_lr(sched.lr, step, warmup));
            model.params().zero_grads();
            epoch_loss += result.report.total;
            // Accumulate the per-epoch mean of every loss term.
            const LossReport& r = result.report;
            epoch_report.emo_itc += r.emo_itc;
            epoch_report.emo_itm += r.emo_itm;
            epoch_report.emo_itg += r.emo_itg;
            epoch_report.au_itc += r.au_itc;
            epoch_report.au_itm += r.au_itm;
            epoch_report.au_itg += r.au_itg;
            epoch_report.ce_au += r.ce_au;
            epoch_report.ce_emo += r.ce_emo;
            epoch_report.total += r.total;
            for (int i = 0; i < kNumAus; ++i) {
                epoch_report.per_au_itc[i] += r.per_au_itc[i];
                epoch_report.per_au_itm[i] += r.per_au_itm[i];
                epoch_report.per_au_itg[i] += r.per_au_itg[i];
            }
            ++batches;
        }
        if (aborted) break;

        if (batches > 0) {
            epoch_report.emo_itc /= batches;
            epoch_report.emo_itm /= batches;
            epoch_report.emo_itg /= batches;
            epoch_report.au_itc /= batches;
            epoch_report.au_itm /= batches;
            epoch_report.au_itg /= batches;
            epoch_report.ce_au /= batches;
            epoch_report.ce_emo /= batches;
            epoch_report.total /= batches;
            for (int i = 0; i < kNumAus; ++i) {
                epoch_report.per_au_itc[i] /= batches;
                epoch_report.per_au_itm[i] /= batches;
                epoch_report.per_au_itg[i] /= batches;
            }
        }
        train_time_total += seconds_since(t0);
        record.epoch_losses.push_back(batches ? epoch_loss / batches : 0.0);
        record.epoch_reports.push_back(epoch_report);

        MetricsReport m = evaluate_model(model, eval_split);
        double macro = track_emotion ? m.emotion_macro_acc : m.au_macro_f1;
        if (macro > best_macro) {
            best_macro = macro;
            record.metrics = m;
            if (!best_path.empty()) model.save_checkpoint(best_path);
        }
        if (!last_path.empty()) model.save_checkpoint(last_path);
    }

    if (sched.epochs == 0 || record.epoch_losses.empty()) {
        // Untrained evaluation only.
        record.metrics = evaluate_model(model, eval_split);
    }

    record.metrics.trainable_params = model.params().trainable_count();
    int epochs_done = static_cast<int>(record.epoch_losses.size());
    record.metrics.train_time_per_epoch = epochs_done ? train_time_total / epochs_done : 0.0;
    record.timings["train_total_s"] = train_time_total;
    record.timings["train_per_epoch_s"] = record.metrics.train_time_per_epoch;
    record.timings["infer_per_epoch_s"] = record.metrics.infer_time_per_epoch;
    record.checkpoint_path = best_path.empty() ? "" : best_path;
    record.finalize_hash();
    return record;
}

AblationVariant ablation_variant_from_string(const std::string& s) {
    if (s == "full_finetune") return AblationVariant::FullFinetune;
    if (s == "w/o_emo_vl" || s == "wo_emo_vl") return AblationVariant::WithoutEmoVl;
    if (s == "w/o_au_vl" || s == "wo_au_vl") return AblationVariant::WithoutAuVl;
    if (s == "dfn_finetune") return AblationVariant::DfnFinetune;
    fail(ErrKind::InvalidArgument, "ablation variant '" + s + "'");
}

std::string ablation_variant_name(AblationVariant v) {
    switch (v) {
        case AblationVariant::FullFinetune: return "full_finetune";
        case AblationVariant::WithoutEmoVl: return "wo_emo_vl";
        case AblationVariant::WithoutAuVl: return "wo_au_vl";
        case AblationVariant::DfnFinetune: return "dfn_finetune";
    }
    return "?";
}

AblationResult run_ablation(AblationVariant variant, const RunConfig& cfg, const TrainData& data,
                            std::shared_ptr<Tokenizer> tok, const std::string& run_dir) {
    RunConfig vcfg = cfg;
    vcfg.model.seed = cfg.seed;
    switch (variant) {
        case AblationVariant::WithoutEmoVl: vcfg.model.emo_branch_enabled = false; break;
        case AblationVariant::WithoutAuVl: vcfg.model.au_branch_enabled = false; break;
        default: break;
    }

    MF2Model model(vcfg.model, tok);
    if (variant == AblationVariant::DfnFinetune) {
        attach_dfn(model, vcfg.dfn);
        model.reinit_heads(cfg.seed ^ 0xf1e2d3ULL);
        freeze_backbone(model);
    }

    AblationResult result;
    result.variant = variant;
    try {
        result.record = train_model(model, data, vcfg.train, cfg.seed, vcfg.to_json(),
                                    run_dir.empty() ? "" : run_dir + "/" +
                                                               ablation_variant_name(variant));
    } catch (const Error& e) {
        fail(e.kind(), std::string(ablation_variant_name(variant)) + ": " + e.what());
    }
    result.trainable_params = result.record.metrics.trainable_params;
    result.train_time_per_epoch = result.record.metrics.train_time_per_epoch;
    return result;
}

FinetuneOutcome finetune_model(MF2Model& model, const RunConfig& cfg, const TrainData& data,
                               const std::string& run_dir) {
    FinetuneOutcome out;
    attach_dfn(model, cfg.dfn);
    model.reinit_heads(cfg.seed ^ 0x686473ULL);
    out.freeze = freeze_backbone(model);
    out.backbone_before = backbone_checksum(model);

    // New-task objective: the task CE term, plus the alignment losses only on
    // request.
    ModelLambdas lam = model.config().lambdas;
    lam.ce_au = cfg.finetune.task == "au" ? 1.0 : 0.0;
    lam.ce_emo = cfg.finetune.task == "emotion" ? 1.0 : 0.0;
    if (!cfg.finetune.use_alignment) {
        lam.itc = 0.0;
        lam.itm = 0.0;
        lam.itg = 0.0;
    }
    model.set_lambdas(lam);

    out.record = train_model(model, data, cfg.finetune_schedule(), cfg.seed, cfg.to_json(),
                             run_dir);
    out.backbone_after = backbone_checksum(model);
    if (!run_dir.empty()) write_text_file(run_dir + "/freeze_report.json", out.freeze.to_json());
    return out;
}

TransitionResult run_transition(const RunConfig& cfg, const TrainData& data,
                                std::shared_ptr<Tokenizer> tok, const std::string& run_dir) {
    TransitionResult result;

    // Untrained reference for the fine-tuned comparison.
    {
        RunConfig base = cfg;
        base.model.seed = cfg.seed;
        MF2Model probe(base.model, tok);
        result.untrained_baseline =
            evaluate_model(probe, data.val.samples.empty() ? data.train : data.val);
    }

    // Phase 1: pretrain on the AU objective (emotion CE off).
    RunConfig pre_cfg = cfg;
    pre_cfg.model.seed = cfg.seed;
    pre_cfg.model.lambdas.ce_emo = 0.0;
    MF2Model model(pre_cfg.model, tok);
    std::string pre_dir = run_dir.empty() ? "" : run_dir + "/pretrain_au";
    result.pretrain = train_model(model, data, pre_cfg.train, cfg.seed, pre_cfg.to_json(), pre_dir);

    // Phase 2: decoupled fine-tuning on the emotion objective.
    RunConfig ft_cfg = cfg;
    ft_cfg.finetune.task = "emotion";
    std::string ft_dir = run_dir.empty() ? "" : run_dir + "/finetune_emotion";
    result.finetune = finetune_model(model, ft_cfg, data, ft_dir);
    return result;
}

MF2Config full_scale_config() {
    MF2Config cfg;
    cfg.encoders.image_size = 224;
    cfg.encoders.patch_size = 16;
    cfg.encoders.embed_dim = 768;
    cfg.encoders.n_heads = 12;
    cfg.encoders.ffn_dim = 3072;
    cfg.encoders.vit_depth = 12;
    cfg.encoders.text_depth = 12;
    cfg.encoders.max_text_len = 169;
    cfg.vocab_size = 30522;
    for (QFormerConfig* q : {&cfg.qformer_emo, &cfg.qformer_au}) {
        q->n_blocks = 12;
        q->n_queries = 32;
        q->embed_dim = 768;
        q->n_heads = 12;
        q->ffn_dim = 3072;
        q->d_proj = 256;
    }
    return cfg;
}

DFNConfig full_scale_dfn_config() {
    DFNConfig dfn;
    // Sized so the adapter share of the full stack sits in the 10-20% band
    // (53.2M pathway cells on a 422M backbone).
    dfn.bottleneck_r = 736;
    dfn.gate = 0.1;
    return dfn;
}

ParamCount count_dfn_finetune_params(const MF2Config& model_cfg, const DFNConfig& dfn_cfg) {
    MF2Model model(model_cfg, nullptr, ag::ParamStore::Mode::CountOnly);
    attach_dfn(model, dfn_cfg);
    ParamCount out;
    out.total = model.params().total_count();
    out.trainable = model.params().count_if([](const ag::ParamStore::Entry& e) {
        return e.name.rfind("dfn.", 0) == 0 || e.name.rfind("head.", 0) == 0;
    });
    out.trainable_fraction =
        out.total ? static_cast<double>(out.trainable) / static_cast<double>(out.total) : 0.0;
    return out;
}

std::string resolve_run_dir(const RunConfig& cfg) {
    if (!cfg.run_dir.empty()) return cfg.run_dir;
    const char* root = std::getenv("MF2_RUN_ROOT");
    std::string base = root && *root ? root : "runs";
    return base + "/" + sha256_hex(cfg.to_json()).substr(0, 12);
}

}  // namespace mf2
