// mf2: dataset construction, annotation, training, decoupled fine-tuning,
// evaluation, ablations, and the pretrain->fine-tune transition, in one
// subcommand binary. Exit codes: 0 success, 1 domain error, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "mf2/annotation.hpp"
#include "mf2/config.hpp"
#include "mf2/trainer.hpp"

using namespace mf2;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "config file (dotted key = value lines)");
    cmd->add_option("--set", args.overrides, "override, key=value (repeatable)");
    cmd->add_option("--seed", args.seed, "global seed for end-to-end determinism");
}

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = parse_config(args.config_path, args.overrides);
    if (args.seed) {
        cfg.seed = *args.seed;
        cfg.model.seed = *args.seed;
    }
    return cfg;
}

void log_event(const std::string& run_dir, const json& event) {
    if (run_dir.empty()) return;
    std::filesystem::create_directories(run_dir);
    std::ofstream out(run_dir + "/log.jsonl", std::ios::app);
    out << event.dump() << "\n";
}

std::vector<CaptionType> parse_types(const std::string& csv) {
    std::vector<CaptionType> types;
    std::string cur;
    std::istringstream in(csv);
    while (std::getline(in, cur, ','))
        if (!cur.empty()) types.push_back(caption_type_from_string(cur));
    if (types.empty()) fail(ErrKind::InvalidArgument, "no caption types given");
    return types;
}

std::shared_ptr<Tokenizer> make_tokenizer(const RunConfig& cfg,
                                          const std::vector<CaptionRecord>& records) {
    if (!cfg.vocab_path.empty())
        return std::make_shared<Tokenizer>(Tokenizer::load(cfg.vocab_path));
    return tokenizer_from_captions(records);
}

struct LoadedData {
    TrainData data;
    std::shared_ptr<Tokenizer> tok;
    std::vector<CaptionRecord> records;
};

LoadedData load_training_inputs(const RunConfig& cfg, bool need_captions) {
    if (cfg.data.train_manifest.empty())
        fail(ErrKind::InvalidArgument, "data.train_manifest is not set");
    DatasetManifest train = load_manifest(cfg.data.train_manifest);
    DatasetManifest val =
        cfg.data.val_manifest.empty() ? DatasetManifest{} : load_manifest(cfg.data.val_manifest);
    ensure_pixels(train, cfg.data.dir);
    if (!val.samples.empty()) ensure_pixels(val, cfg.data.dir);

    LoadedData out;
    if (!cfg.data.captions.empty())
        out.records = load_captions(cfg.data.captions);
    else if (need_captions)
        fail(ErrKind::InvalidArgument, "data.captions is not set");
    out.tok = make_tokenizer(cfg, out.records);
    out.data = make_train_data(std::move(train), std::move(val), out.records);
    return out;
}

void write_run_outputs(const std::string& run_dir, const RunRecord& record) {
    if (run_dir.empty()) return;
    std::filesystem::create_directories(run_dir);
    write_text_file(run_dir + "/run_record.json", record.to_json());
    write_text_file(run_dir + "/report_au.txt", render_au_table(record.metrics));
    write_text_file(run_dir + "/report_emotion.txt", render_emotion_table(record.metrics));
}

void print_reports(const RunRecord& record) {
    std::cout << "AU recognition (F1 %):\n" << render_au_table(record.metrics);
    std::cout << "Emotion recognition (accuracy %):\n" << render_emotion_table(record.metrics);
    std::cout << "trainable params: " << record.metrics.trainable_params
              << "  train s/epoch: " << record.metrics.train_time_per_epoch
              << "  infer s/epoch: " << record.metrics.infer_time_per_epoch << "\n";
    std::cout << "run content hash: " << record.content_hash << "\n";
}

int cmd_fixture(int videos, int frames, std::uint64_t seed, int image_size, double missing_au,
                const std::string& out_dir) {
    FixtureOptions opts;
    opts.image_size = image_size;
    opts.missing_au_fraction = missing_au;
    DatasetManifest m = make_fixture_dataset(videos, frames, seed, opts);
    materialize_fixture(m, out_dir);
    std::cout << "wrote " << m.samples.size() << " samples to " << out_dir << "\n";
    return 0;
}

int cmd_data(const std::string& op, const std::string& in, const std::string& out,
             double tolerance, double train_fraction, std::uint64_t seed) {
    DatasetManifest m = load_manifest(in);
    if (op == "filter") {
        save_manifest(out, filter_samples(m));
    } else if (op == "balance") {
        save_manifest(out, balance_classes(m, tolerance, seed));
    } else {
        auto [train, val] = split_by_video(m, train_fraction, seed);
        std::filesystem::create_directories(out);
        save_manifest(out + "/train.jsonl", train);
        save_manifest(out + "/val.jsonl", val);
    }
    std::cout << op << " done\n";
    return 0;
}

int cmd_annotate(const RunConfig& cfg, const std::string& in, const std::string& out,
                 const std::string& types_csv, const std::string& client_name) {
    DatasetManifest m = load_manifest(in);
    std::unique_ptr<AnnotationClient> client;
    if (client_name == "mock") {
        client = std::make_unique<MockClient>(cfg.seed);
    } else if (client_name == "remote") {
        const char* endpoint = std::getenv(cfg.annotate.endpoint_env.c_str());
        if (!endpoint || !*endpoint)
            fail(ErrKind::InvalidArgument,
                 "environment variable " + cfg.annotate.endpoint_env + " is not set");
        client = std::make_unique<RemoteClient>(endpoint);
    } else {
        fail(ErrKind::InvalidArgument, "client must be mock or remote");
    }
    AnnotateOptions opts;
    opts.key_au_budget = cfg.annotate.key_au_budget;
    AnnotateResult result = annotate_dataset(m, *client, parse_types(types_csv), opts);
    save_captions(out, result.records);
    std::cout << "wrote " << result.records.size() << " caption records";
    if (!result.failed.empty()) {
        std::cout << ", " << result.failed.size() << " failed:";
        for (const auto& f : result.failed)
            std::cout << " " << f.sample_id << "/" << caption_type_name(f.caption_type);
    }
    std::cout << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    LoadedData in = load_training_inputs(cfg, /*need_captions=*/true);
    std::string run_dir = resolve_run_dir(cfg);
    log_event(run_dir, {{"event", "train_started"}, {"seed", cfg.seed}});

    RunConfig echo = cfg;
    echo.model.vocab_size = in.tok->vocab_size();
    MF2Model model(echo.model, in.tok);
    RunRecord record = train_model(model, in.data, cfg.train, cfg.seed, echo.to_json(), run_dir);
    write_run_outputs(run_dir, record);
    print_reports(record);
    log_event(run_dir, {{"event", "train_finished"}, {"content_hash", record.content_hash}});
    std::cout << "run dir: " << run_dir << "\n";
    return 0;
}

int cmd_finetune(const RunConfig& cfg, const std::string& checkpoint) {
    MF2Model model = load_model_checkpoint(checkpoint);
    LoadedData in = load_training_inputs(cfg, cfg.finetune.use_alignment);
    std::string run_dir = resolve_run_dir(cfg);
    log_event(run_dir, {{"event", "finetune_started"}, {"task", cfg.finetune.task}});

    FinetuneOutcome outcome = finetune_model(model, cfg, in.data, run_dir);
    write_run_outputs(run_dir, outcome.record);
    print_reports(outcome.record);
    std::cout << "backbone checksum stable: "
              << (outcome.backbone_before == outcome.backbone_after ? "yes" : "NO") << "\n";
    std::cout << "trainable fraction: " << outcome.freeze.trainable_fraction << "\n";
    log_event(run_dir, {{"event", "finetune_finished"},
                        {"content_hash", outcome.record.content_hash},
                        {"backbone_stable", outcome.backbone_before == outcome.backbone_after}});
    std::cout << "run dir: " << run_dir << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint) {
    std::string run_dir = resolve_run_dir(cfg);
    log_event(run_dir, {{"event", "eval_started"}, {"checkpoint", checkpoint}});
    MF2Model model = load_model_checkpoint(checkpoint);
    std::string manifest_path =
        cfg.eval_split == "val" ? cfg.data.val_manifest : cfg.data.train_manifest;
    if (manifest_path.empty())
        fail(ErrKind::InvalidArgument, "no manifest configured for split " + cfg.eval_split);
    DatasetManifest split = load_manifest(manifest_path);
    ensure_pixels(split, cfg.data.dir);

    model.text_encoder().reset_call_count();
    MetricsReport metrics = evaluate_model(model, split);
    if (model.text_encoder().call_count() != 0)
        fail(ErrKind::InvalidArgument, "evaluation touched the text encoder");

    RunRecord record;
    record.config_echo = cfg.to_json();
    record.input_hash = sha256_hex(serialize_manifest(split));
    record.metrics = metrics;
    record.finalize_hash();
    write_run_outputs(run_dir, record);
    print_reports(record);
    std::cout << "text encoder calls during eval: " << model.text_encoder().call_count() << "\n";
    log_event(run_dir, {{"event", "eval_finished"}, {"content_hash", record.content_hash}});
    std::cout << "run dir: " << run_dir << "\n";
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& variants_csv) {
    LoadedData in = load_training_inputs(cfg, /*need_captions=*/true);
    std::vector<AblationVariant> variants;
    if (variants_csv == "all") {
        variants = {AblationVariant::FullFinetune, AblationVariant::WithoutEmoVl,
                    AblationVariant::WithoutAuVl, AblationVariant::DfnFinetune};
    } else {
        std::istringstream ss(variants_csv);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) variants.push_back(ablation_variant_from_string(item));
    }

    std::string run_dir = resolve_run_dir(cfg);
    log_event(run_dir, {{"event", "ablate_started"}, {"variants", variants_csv}});
    std::string table = "variant           acc%    f1%     TT(s)    IT(s)    TP\n";
    for (AblationVariant v : variants) {
        RunConfig vcfg = cfg;
        vcfg.model.vocab_size = in.tok->vocab_size();
        AblationResult r = run_ablation(v, vcfg, in.data, in.tok, run_dir);
        write_text_file(run_dir + "/" + ablation_variant_name(v) + "/run_record.json",
                        r.record.to_json());
        char line[160];
        std::snprintf(line, sizeof(line), "%-16s %7.2f %7.2f %8.3f %8.3f %10zu\n",
                      ablation_variant_name(v).c_str(), r.record.metrics.emotion_macro_acc,
                      r.record.metrics.au_macro_f1, r.train_time_per_epoch,
                      r.record.metrics.infer_time_per_epoch, r.trainable_params);
        table += line;
        log_event(run_dir, {{"event", "ablate_variant_finished"},
                            {"variant", ablation_variant_name(v)},
                            {"content_hash", r.record.content_hash}});
    }
    std::cout << table;
    write_text_file(run_dir + "/ablation_table.txt", table);
    std::cout << "run dir: " << run_dir << "\n";
    return 0;
}

int cmd_transition(const RunConfig& cfg) {
    LoadedData in = load_training_inputs(cfg, /*need_captions=*/true);
    std::string run_dir = resolve_run_dir(cfg);
    log_event(run_dir, {{"event", "transition_started"}});
    RunConfig echo = cfg;
    echo.model.vocab_size = in.tok->vocab_size();
    TransitionResult result = run_transition(echo, in.data, in.tok, run_dir);
    write_text_file(run_dir + "/pretrain_record.json", result.pretrain.to_json());
    write_text_file(run_dir + "/finetune_record.json", result.finetune.record.to_json());
    write_text_file(run_dir + "/report_au.txt", render_au_table(result.pretrain.metrics));
    write_text_file(run_dir + "/report_emotion.txt",
                    render_emotion_table(result.finetune.record.metrics));
    log_event(run_dir, {{"event", "transition_finished"},
                        {"pretrain_hash", result.pretrain.content_hash},
                        {"finetune_hash", result.finetune.record.content_hash}});

    std::cout << "phase 1 (AU pretrain) macro F1: " << result.pretrain.metrics.au_macro_f1 << "\n";
    std::cout << "phase 2 (emotion fine-tune) macro acc: "
              << result.finetune.record.metrics.emotion_macro_acc << "\n";
    std::cout << "untrained baseline macro acc: " << result.untrained_baseline.emotion_macro_acc
              << "\n";
    std::cout << "backbone checksum stable: "
              << (result.finetune.backbone_before == result.finetune.backbone_after ? "yes" : "NO")
              << "\n";
    std::cout << "run dir: " << run_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multilevel multimodal face analysis toolkit"};
    app.require_subcommand(1);

    // fixture
    auto* fixture = app.add_subcommand("fixture", "generate a synthetic dataset");
    int fx_videos = 4, fx_frames = 4, fx_size = 32;
    std::uint64_t fx_seed = 0;
    double fx_missing_au = 0.0;
    std::string fx_out;
    fixture->add_option("--videos", fx_videos);
    fixture->add_option("--frames", fx_frames);
    fixture->add_option("--seed", fx_seed);
    fixture->add_option("--image-size", fx_size);
    fixture->add_option("--missing-au-fraction", fx_missing_au);
    fixture->add_option("--out", fx_out)->required();

    // data filter|balance|split
    auto* data = app.add_subcommand("data", "dataset filtering, balancing, splitting");
    data->require_subcommand(1);
    std::string d_in, d_out;
    double d_tolerance = 0.10, d_train_fraction = kDefaultTrainFraction;
    std::uint64_t d_seed = 0;
    CLI::App* d_ops[3];
    const char* d_names[3] = {"filter", "balance", "split"};
    for (int i = 0; i < 3; ++i) {
        d_ops[i] = data->add_subcommand(d_names[i]);
        d_ops[i]->add_option("--in", d_in)->required();
        d_ops[i]->add_option("--out", d_out)->required();
        d_ops[i]->add_option("--seed", d_seed);
    }
    d_ops[1]->add_option("--tolerance", d_tolerance);
    d_ops[2]->add_option("--train-fraction", d_train_fraction);

    // annotate
    auto* annotate = app.add_subcommand("annotate", "generate caption records");
    CommonArgs an_common;
    std::string an_in, an_out, an_types = "au,emotion,key_au", an_client = "mock",
                an_endpoint_env;
    annotate->add_option("--in", an_in)->required();
    annotate->add_option("--out", an_out)->required();
    annotate->add_option("--types", an_types);
    annotate->add_option("--client", an_client)->check(CLI::IsMember({"mock", "remote"}));
    annotate->add_option("--endpoint-env", an_endpoint_env);
    add_common(annotate, an_common);

    // train / finetune / eval / ablate / transition
    CommonArgs tr_common, ft_common, ev_common, ab_common, ts_common;
    auto* train = app.add_subcommand("train", "pretrain the foundation model");
    add_common(train, tr_common);

    auto* finetune = app.add_subcommand("finetune", "decoupled fine-tuning of a checkpoint");
    std::string ft_checkpoint, ft_task, ft_tap;
    int ft_r = -1;
    double ft_gate = -1.0;
    finetune->add_option("--checkpoint", ft_checkpoint)->required();
    finetune->add_option("--task", ft_task)->check(CLI::IsMember({"au", "emotion"}));
    finetune->add_option("--dfn.r", ft_r);
    finetune->add_option("--dfn.gate", ft_gate);
    finetune->add_option("--dfn.tap", ft_tap)->check(CLI::IsMember({"blockwise", "cls"}));
    add_common(finetune, ft_common);

    auto* eval = app.add_subcommand("eval", "image-only evaluation of a checkpoint");
    std::string ev_checkpoint, ev_split;
    eval->add_option("--checkpoint", ev_checkpoint)->required();
    eval->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val"}));
    add_common(eval, ev_common);

    auto* ablate = app.add_subcommand("ablate", "run the ablation matrix");
    std::string ab_variants = "all";
    ablate->add_option("--variants", ab_variants);
    add_common(ablate, ab_common);

    auto* transition = app.add_subcommand("transition", "AU pretrain then emotion fine-tune");
    add_common(transition, ts_common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (fixture->parsed())
            return cmd_fixture(fx_videos, fx_frames, fx_seed, fx_size, fx_missing_au, fx_out);
        if (data->parsed()) {
            for (int i = 0; i < 3; ++i)
                if (d_ops[i]->parsed())
                    return cmd_data(d_names[i], d_in, d_out, d_tolerance, d_train_fraction, d_seed);
        }
        if (annotate->parsed()) {
            RunConfig cfg = load_config(an_common);
            if (!an_endpoint_env.empty()) cfg.annotate.endpoint_env = an_endpoint_env;
            return cmd_annotate(cfg, an_in, an_out, an_types, an_client);
        }
        if (train->parsed()) return cmd_train(load_config(tr_common));
        if (finetune->parsed()) {
            RunConfig cfg = load_config(ft_common);
            if (!ft_task.empty()) cfg.finetune.task = ft_task;
            if (ft_r > 0) cfg.dfn.bottleneck_r = ft_r;
            if (ft_gate > 0) cfg.dfn.gate = ft_gate;
            if (!ft_tap.empty()) cfg.dfn.tap = dfn_tap_from_string(ft_tap);
            return cmd_finetune(cfg, ft_checkpoint);
        }
        if (eval->parsed()) {
            RunConfig cfg = load_config(ev_common);
            if (!ev_split.empty()) cfg.eval_split = ev_split;
            return cmd_eval(cfg, ev_checkpoint);
        }
        if (ablate->parsed()) return cmd_ablate(load_config(ab_common), ab_variants);
        if (transition->parsed()) return cmd_transition(load_config(ts_common));
    } catch (const Error& e) {
        json err = {{"error", err_kind_name(e.kind())}, {"detail", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        json err = {{"error", "Unhandled"}, {"detail", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 2;
}
