#include "mf2/dfn.hpp"

#include <json.hpp>

#include <cmath>

namespace mf2 {

using ag::Var;

DfnActivation dfn_activation_from_string(const std::string& s) {
    if (s == "relu") return DfnActivation::Relu;
    if (s == "sigmoid") return DfnActivation::Sigmoid;
    fail(ErrKind::InvalidArgument, "activation '" + s + "'");
}

std::string dfn_config_to_json(const DFNConfig& cfg) {
    nlohmann::json j;
    j["r"] = cfg.bottleneck_r;
    j["gate"] = cfg.gate;
    j["activation"] = cfg.activation == DfnActivation::Relu ? "relu" : "sigmoid";
    j["n_adapter_layers"] = cfg.n_adapter_layers;
    j["tap"] = cfg.tap == DfnTapMode::Blockwise ? "blockwise" : "cls_last_layer";
    return j.dump();
}

DFNConfig dfn_config_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    DFNConfig cfg;
    cfg.bottleneck_r = j.at("r").get<int>();
    cfg.gate = j.at("gate").get<double>();
    cfg.activation = dfn_activation_from_string(j.at("activation").get<std::string>());
    cfg.n_adapter_layers = j.at("n_adapter_layers").get<int>();
    cfg.tap = dfn_tap_from_string(j.at("tap").get<std::string>());
    return cfg;
}

DfnTapMode dfn_tap_from_string(const std::string& s) {
    if (s == "blockwise") return DfnTapMode::Blockwise;
    if (s == "cls" || s == "cls_last_layer") return DfnTapMode::ClsLastLayer;
    fail(ErrKind::InvalidArgument, "tap mode '" + s + "'");
}

Var adapter_forward(const AdapterCell& cell, const Var& x) {
    if (x.cols() != cell.dim)
        fail(ErrKind::DimMismatch, "adapter expects last dim " + std::to_string(cell.dim) +
                                       ", got " + std::to_string(x.cols()));
    Var h = ag::add_rowvec(ag::matmul(x, cell.down_w), cell.down_b);
    h = cell.activation == DfnActivation::Relu ? ag::relu(h) : ag::sigmoid(h);
    Var up = ag::add_rowvec(ag::matmul(h, cell.up_w), cell.up_b);
    return ag::scale(up, cell.gate);
}

namespace {

// One adapter per block of one pathway.
class PathwayTap : public SideTap {
public:
    explicit PathwayTap(std::vector<AdapterCell> cells) : cells_(std::move(cells)) {}

    Var delta(int block_index, const Var& block_input) const override {
        if (block_index < 0 || block_index >= static_cast<int>(cells_.size()))
            fail(ErrKind::DimMismatch, "tap block index out of range");
        return adapter_forward(cells_[block_index], block_input);
    }

    const std::vector<AdapterCell>& cells() const { return cells_; }

private:
    std::vector<AdapterCell> cells_;
};

AdapterCell make_cell(ag::ParamStore& store, const std::string& name, int dim, int r,
                      const DFNConfig& cfg, Rng& rng) {
    AdapterCell cell;
    cell.dim = dim;
    cell.bottleneck = r;
    cell.activation = cfg.activation;
    cell.gate = cfg.gate;
    cell.down_w = store.add(name + ".down.w", dim, r, nn::init_normal, rng);
    cell.down_b = store.add_zeros(name + ".down.b", 1, r);
    cell.up_w = store.add_zeros(name + ".up.w", r, dim);  // zero init: wrapped == unwrapped
    cell.up_b = store.add_zeros(name + ".up.b", 1, dim);
    return cell;
}

std::vector<AdapterCell> make_stack(ag::ParamStore& store, const std::string& pathway, int count,
                                    int dim, const DFNConfig& cfg, Rng& rng) {
    std::vector<AdapterCell> cells;
    cells.reserve(count);
    for (int i = 0; i < count; ++i)
        cells.push_back(
            make_cell(store, "dfn." + pathway + ".cell" + std::to_string(i), dim, cfg.bottleneck_r,
                      cfg, rng));
    return cells;
}

bool is_adapter_or_head(const std::string& name) {
    return name.rfind("dfn.", 0) == 0 || name.rfind("head.", 0) == 0;
}

std::string group_of(const std::string& name) {
    auto dot = name.find('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
}

}  // namespace

DfnState attach_dfn(MF2Model& model, const DFNConfig& cfg) {
    if (model.dfn_attached()) fail(ErrKind::AlreadyAttached, "model already carries a DFN");
    const int dim = model.config().encoders.embed_dim;
    if (cfg.bottleneck_r < 1 || cfg.bottleneck_r >= dim)
        fail(ErrKind::ConfigMismatch, "bottleneck r=" + std::to_string(cfg.bottleneck_r) +
                                          " must satisfy 1 <= r < " + std::to_string(dim));
    if (cfg.gate <= 0.0 || cfg.gate > 1.0)
        fail(ErrKind::InvalidArgument, "gate must be in (0, 1]");
    if (cfg.n_adapter_layers < 1) fail(ErrKind::InvalidArgument, "n_adapter_layers must be >= 1");

    Rng rng(model.config().seed ^ 0x64666eULL);
    DfnState state;
    state.config = cfg;
    DfnHooks hooks;

    if (cfg.tap == DfnTapMode::Blockwise) {
        if (model.config().emo_branch_enabled) {
            const int n_emo = model.config().qformer_emo.n_blocks;
            state.pathways["emo_query"] =
                make_stack(model.params(), "emo_query", n_emo, dim, cfg, rng);
            state.pathways["emo_text"] =
                make_stack(model.params(), "emo_text", n_emo, dim, cfg, rng);
            hooks.emo_query = std::make_shared<PathwayTap>(state.pathways["emo_query"]);
            hooks.emo_text = std::make_shared<PathwayTap>(state.pathways["emo_text"]);
        }
        if (model.config().au_branch_enabled) {
            const int n_au = model.config().qformer_au.n_blocks;
            state.pathways["au_query"] = make_stack(model.params(), "au_query", n_au, dim, cfg, rng);
            state.pathways["au_text"] = make_stack(model.params(), "au_text", n_au, dim, cfg, rng);
            hooks.au_query = std::make_shared<PathwayTap>(state.pathways["au_query"]);
            hooks.au_text = std::make_shared<PathwayTap>(state.pathways["au_text"]);
        }
    } else {
        state.pathways["vis_cls"] =
            make_stack(model.params(), "vis_cls", cfg.n_adapter_layers, dim, cfg, rng);
        state.pathways["txt_cls"] =
            make_stack(model.params(), "txt_cls", cfg.n_adapter_layers, dim, cfg, rng);
        auto make_cls_hook = [](std::vector<AdapterCell> cells) {
            return [cells = std::move(cells)](const Var& cls) {
                Var y = cls;
                for (const auto& cell : cells) y = ag::add(y, adapter_forward(cell, y));
                return y;
            };
        };
        hooks.vis_cls = make_cls_hook(state.pathways["vis_cls"]);
        hooks.txt_cls = make_cls_hook(state.pathways["txt_cls"]);
    }

    model.install_dfn_hooks(std::move(hooks), dfn_config_to_json(cfg));
    return state;
}

namespace {

FreezeReport build_report(const ag::ParamStore& store) {
    FreezeReport r;
    for (const auto& e : store.entries()) {
        if (!e.var.defined()) continue;
        std::size_t n = static_cast<std::size_t>(e.rows) * e.cols;
        auto& group = r.per_group[group_of(e.name)];
        if (e.var.requires_grad()) {
            r.trainable_param_count += n;
            group.second += n;
        } else {
            r.frozen_param_count += n;
            group.first += n;
        }
    }
    r.total_param_count = r.frozen_param_count + r.trainable_param_count;
    r.trainable_fraction =
        r.total_param_count ? static_cast<double>(r.trainable_param_count) / r.total_param_count
                            : 0.0;
    return r;
}

}  // namespace

FreezeReport freeze_backbone(MF2Model& model) {
    if (!model.dfn_attached()) fail(ErrKind::NotAttached, "attach_dfn must run first");
    auto& store = model.params();
    store.set_requires_grad(
        [](const ag::ParamStore::Entry& e) { return !is_adapter_or_head(e.name); }, false);
    store.set_requires_grad(
        [](const ag::ParamStore::Entry& e) { return is_adapter_or_head(e.name); }, true);
    return build_report(store);
}

FreezeReport count_freeze_state(const MF2Model& model) { return build_report(model.params()); }

std::string backbone_checksum(const MF2Model& model) {
    return model.params().checksum(
        [](const ag::ParamStore::Entry& e) { return !is_adapter_or_head(e.name); });
}

std::string FreezeReport::to_json() const {
    nlohmann::json j;
    j["frozen_param_count"] = frozen_param_count;
    j["trainable_param_count"] = trainable_param_count;
    j["total_param_count"] = total_param_count;
    j["trainable_fraction"] = trainable_fraction;
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& [name, counts] : per_group)
        groups[name] = {{"frozen", counts.first}, {"trainable", counts.second}};
    j["per_group"] = std::move(groups);
    return j.dump(2);
}

LossReport finetune_step(MF2Model& model, const std::vector<MF2Model::TrainItem>& batch,
                         AdamW& optimizer, double lr, std::uint64_t step_seed) {
    if (!model.dfn_attached()) fail(ErrKind::NotAttached, "finetune_step needs an attached DFN");
    auto result = model.forward_train_batch(batch, step_seed);
    if (!std::isfinite(result.report.total))
        fail(ErrKind::NaNLoss, "non-finite fine-tuning loss; step aborted");
    ag::backward(result.loss);
    optimizer.step(model.params(), lr);
    model.params().zero_grads();
    return result.report;
}

}  // namespace mf2
