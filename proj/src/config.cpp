#include "mf2/config.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <sstream>

namespace mf2 {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

[[noreturn]] void type_error(const std::string& key, const std::string& expect) {
    fail(ErrKind::ConfigType, key + " expects " + expect);
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        int out = std::stoi(v, &pos);
        if (pos != v.size()) type_error(key, "an integer");
        return out;
    } catch (const Error&) {
        throw;
    } catch (...) {
        type_error(key, "an integer");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        unsigned long long out = std::stoull(v, &pos);
        if (pos != v.size()) type_error(key, "an unsigned integer");
        return out;
    } catch (const Error&) {
        throw;
    } catch (...) {
        type_error(key, "an unsigned integer");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) type_error(key, "a number");
        return out;
    } catch (const Error&) {
        throw;
    } catch (...) {
        type_error(key, "a number");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    type_error(key, "a boolean (true/false)");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

void set_qformer(QFormerConfig& q, const std::string& key, const std::string& field,
                 const std::string& v) {
    if (field == "n_blocks") q.n_blocks = parse_int(key, v);
    else if (field == "n_queries") q.n_queries = parse_int(key, v);
    else if (field == "n_heads") q.n_heads = parse_int(key, v);
    else if (field == "ffn_dim") q.ffn_dim = parse_int(key, v);
    else if (field == "temperature") q.temperature = parse_double(key, v);
    else if (field == "learnable_temperature") q.learnable_temperature = parse_bool(key, v);
    else if (field == "itg_style") q.itg_style = itg_style_from_string(v);
    else if (field == "d_proj") q.d_proj = parse_int(key, v);
    else if (field == "negatives_seed") q.negatives_seed = parse_u64(key, v);
    else fail(ErrKind::UnknownKey, key);
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"seed", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.seed = parse_u64(k, v);
             c.model.seed = c.seed;
         }},
        {"run_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.run_dir = v; }},

        {"data.dir", [](RunConfig& c, const std::string&, const std::string& v) { c.data.dir = v; }},
        {"data.train_manifest",
         [](RunConfig& c, const std::string&, const std::string& v) { c.data.train_manifest = v; }},
        {"data.val_manifest",
         [](RunConfig& c, const std::string&, const std::string& v) { c.data.val_manifest = v; }},
        {"data.captions",
         [](RunConfig& c, const std::string&, const std::string& v) { c.data.captions = v; }},
        {"data.tolerance", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.data.tolerance = parse_double(k, v);
         }},
        {"data.train_fraction", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.data.train_fraction = parse_double(k, v);
         }},

        {"annotate.types",
         [](RunConfig& c, const std::string&, const std::string& v) { c.annotate.types = v; }},
        {"annotate.client",
         [](RunConfig& c, const std::string&, const std::string& v) { c.annotate.client = v; }},
        {"annotate.endpoint_env",
         [](RunConfig& c, const std::string&, const std::string& v) { c.annotate.endpoint_env = v; }},
        {"annotate.key_au_budget", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.annotate.key_au_budget = parse_int(k, v);
             c.model.encoders.key_au_budget = c.annotate.key_au_budget;
         }},

        {"encoders.image_size", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.encoders.image_size = parse_int(k, v);
         }},
        {"encoders.patch_size", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.encoders.patch_size = parse_int(k, v);
         }},
        {"encoders.embed_dim", [](RunConfig& c, const std::string& k, const std::string& v) {
             int d = parse_int(k, v);
             c.model.encoders.embed_dim = d;
             c.model.qformer_emo.embed_dim = d;
             c.model.qformer_au.embed_dim = d;
         }},
        {"encoders.n_heads", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.encoders.n_heads = parse_int(k, v);
         }},
        {"encoders.ffn_dim", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.encoders.ffn_dim = parse_int(k, v);
         }},
        {"encoders.vit_depth", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.encoders.vit_depth = parse_int(k, v);
         }},
        {"encoders.text_depth", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.encoders.text_depth = parse_int(k, v);
         }},
        {"encoders.region_k", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.encoders.region_k = parse_int(k, v);
         }},
        {"encoders.max_text_len", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.encoders.max_text_len = parse_int(k, v);
         }},
        {"encoders.vocab_path",
         [](RunConfig& c, const std::string&, const std::string& v) { c.vocab_path = v; }},
        {"encoders.au_map_path", [](RunConfig& c, const std::string&, const std::string& v) {
             c.model.encoders.au_map_path = v;
         }},

        {"model.lambda_itc", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.lambdas.itc = parse_double(k, v);
         }},
        {"model.lambda_itm", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.lambdas.itm = parse_double(k, v);
         }},
        {"model.lambda_itg", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.lambdas.itg = parse_double(k, v);
         }},
        {"model.lambda_ce_au", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.lambdas.ce_au = parse_double(k, v);
         }},
        {"model.lambda_ce_emo", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.lambdas.ce_emo = parse_double(k, v);
         }},
        {"model.use_key_au_for_emo", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.use_key_au_for_emo = parse_bool(k, v);
         }},
        {"model.freeze_encoders", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.freeze_encoders = parse_bool(k, v);
         }},
        {"model.itg_mask_fraction", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.itg_mask_fraction = parse_double(k, v);
         }},

        {"dfn.r", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.dfn.bottleneck_r = parse_int(k, v);
         }},
        {"dfn.gate", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.dfn.gate = parse_double(k, v);
         }},
        {"dfn.activation", [](RunConfig& c, const std::string&, const std::string& v) {
             c.dfn.activation = dfn_activation_from_string(v);
         }},
        {"dfn.n_adapter_layers", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.dfn.n_adapter_layers = parse_int(k, v);
         }},
        {"dfn.tap", [](RunConfig& c, const std::string&, const std::string& v) {
             c.dfn.tap = dfn_tap_from_string(v);
         }},

        {"train.lr", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.lr = parse_double(k, v);
         }},
        {"train.weight_decay", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.weight_decay = parse_double(k, v);
         }},
        {"train.warmup_steps", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.warmup_steps = parse_int(k, v);
         }},
        {"train.epochs", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.epochs = parse_int(k, v);
         }},
        {"train.batch_size", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.batch_size = parse_int(k, v);
         }},

        {"finetune.task",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v != "au" && v != "emotion") type_error(k, "au or emotion");
             c.finetune.task = v;
         }},
        {"finetune.use_alignment", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.finetune.use_alignment = parse_bool(k, v);
         }},
        {"finetune.lr", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.finetune.lr = parse_double(k, v);
         }},
        {"finetune.epochs", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.finetune.epochs = parse_int(k, v);
         }},
        {"finetune.batch_size", [](RunConfig& c, const std::string& k, const std::string& v) {
             c.finetune.batch_size = parse_int(k, v);
         }},

        {"eval.split",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v != "train" && v != "val") type_error(k, "train or val");
             c.eval_split = v;
         }},
    };
    return table;
}

void dispatch_qformer_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    const std::string emo_prefix = "qformer_emo.";
    const std::string au_prefix = "qformer_au.";
    if (key.rfind(emo_prefix, 0) == 0) {
        set_qformer(cfg.model.qformer_emo, key, key.substr(emo_prefix.size()), value);
    } else if (key.rfind(au_prefix, 0) == 0) {
        set_qformer(cfg.model.qformer_au, key, key.substr(au_prefix.size()), value);
    } else {
        fail(ErrKind::UnknownKey, key);
    }
}

}  // namespace

void apply_config_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    auto it = setters().find(key);
    if (it != setters().end()) {
        it->second(cfg, key, value);
        return;
    }
    if (key.rfind("qformer_", 0) == 0) {
        dispatch_qformer_key(cfg, key, value);
        return;
    }
    fail(ErrKind::UnknownKey, key);
}

RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!path.empty()) {
        std::istringstream in(read_text_file(path));
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos)
                fail(ErrKind::ConfigType,
                     "line " + std::to_string(line_no) + ": expected key = value");
            apply_config_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }
    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos)
            fail(ErrKind::ConfigType, "override '" + ov + "': expected key=value");
        apply_config_override(cfg, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
    }
    return cfg;
}

TrainSchedule RunConfig::finetune_schedule() const {
    TrainSchedule s = train;
    if (finetune.lr > 0.0) s.lr = finetune.lr;
    if (finetune.epochs > 0) s.epochs = finetune.epochs;
    if (finetune.batch_size > 0) s.batch_size = finetune.batch_size;
    return s;
}

std::string RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["run_dir"] = run_dir;
    j["data"] = {{"dir", data.dir},
                 {"train_manifest", data.train_manifest},
                 {"val_manifest", data.val_manifest},
                 {"captions", data.captions},
                 {"tolerance", data.tolerance},
                 {"train_fraction", data.train_fraction}};
    j["annotate"] = {{"types", annotate.types},
                     {"client", annotate.client},
                     {"endpoint_env", annotate.endpoint_env},
                     {"key_au_budget", annotate.key_au_budget}};
    j["vocab_path"] = vocab_path;
    j["model"] = json::parse(mf2_config_to_json(model));
    j["dfn"] = {{"r", dfn.bottleneck_r},
                {"gate", dfn.gate},
                {"activation", dfn.activation == DfnActivation::Relu ? "relu" : "sigmoid"},
                {"n_adapter_layers", dfn.n_adapter_layers},
                {"tap", dfn.tap == DfnTapMode::Blockwise ? "blockwise" : "cls_last_layer"}};
    j["train"] = {{"lr", train.lr},
                  {"weight_decay", train.weight_decay},
                  {"warmup_steps", train.warmup_steps},
                  {"epochs", train.epochs},
                  {"batch_size", train.batch_size}};
    j["finetune"] = {{"task", finetune.task},
                     {"use_alignment", finetune.use_alignment},
                     {"lr", finetune.lr},
                     {"epochs", finetune.epochs},
                     {"batch_size", finetune.batch_size}};
    j["eval"] = {{"split", eval_split}};
    return j.dump();
}

std::string config_reference() {
    std::ostringstream out;
    out << "seed = 0\n"
        << "run_dir =            # empty: content-addressed under MF2_RUN_ROOT\n"
        << "data.dir =\n"
        << "data.train_manifest =\n"
        << "data.val_manifest =\n"
        << "data.captions =\n"
        << "data.tolerance = 0.10\n"
        << "data.train_fraction = 0.903\n"
        << "annotate.types = au,emotion,key_au\n"
        << "annotate.client = mock\n"
        << "annotate.endpoint_env = MF2_LLM_ENDPOINT\n"
        << "annotate.key_au_budget = 169\n"
        << "encoders.image_size = 224\n"
        << "encoders.patch_size = 16\n"
        << "encoders.embed_dim = 64\n"
        << "encoders.n_heads = 4\n"
        << "encoders.ffn_dim = 128\n"
        << "encoders.vit_depth = 2\n"
        << "encoders.text_depth = 2\n"
        << "encoders.region_k = 3\n"
        << "encoders.max_text_len = 169\n"
        << "encoders.vocab_path =\n"
        << "encoders.au_map_path =\n"
        << "qformer_emo.n_blocks = 2    # n_queries 8, temperature 0.07, d_proj 32\n"
        << "qformer_au.n_blocks = 2     # same keys as qformer_emo\n"
        << "model.lambda_itc = 1.0\n"
        << "model.lambda_itm = 1.0\n"
        << "model.lambda_itg = 1.0\n"
        << "model.lambda_ce_au = 1.0\n"
        << "model.lambda_ce_emo = 1.0\n"
        << "model.use_key_au_for_emo = false\n"
        << "model.freeze_encoders = true\n"
        << "model.itg_mask_fraction = 0.15\n"
        << "dfn.r = 64\n"
        << "dfn.gate = 0.1\n"
        << "dfn.activation = relu\n"
        << "dfn.n_adapter_layers = 7\n"
        << "dfn.tap = blockwise\n"
        << "train.lr = 0.0001\n"
        << "train.weight_decay = 0.05\n"
        << "train.warmup_steps = 2000\n"
        << "train.epochs = 30\n"
        << "train.batch_size = 8\n"
        << "finetune.task = emotion\n"
        << "finetune.use_alignment = false\n"
        << "finetune.lr = 0            # 0 inherits train.lr\n"
        << "finetune.epochs = 0        # 0 inherits train.epochs\n"
        << "finetune.batch_size = 0    # 0 inherits train.batch_size\n"
        << "eval.split = val\n";
    return out.str();
}

}  // namespace mf2
