#pragma once

// Decoupled fine-tuning network: gated bottleneck cells running parallel to
// the frozen stack. Blockwise tap mode places one cell per block on each of
// the four modality pathways (global-visual, global-text, local-visual,
// local-text), 4N cells for N blocks per branch; the alternative tap mode
// stacks cells on each encoder's final CLS token.

#include <map>
#include <string>
#include <vector>

#include "mf2/mf2_model.hpp"
#include "mf2/optim.hpp"

namespace mf2 {

enum class DfnActivation { Relu, Sigmoid };
enum class DfnTapMode { Blockwise, ClsLastLayer };

DfnActivation dfn_activation_from_string(const std::string& s);
DfnTapMode dfn_tap_from_string(const std::string& s);

struct DFNConfig;
std::string dfn_config_to_json(const DFNConfig& cfg);
DFNConfig dfn_config_from_json(const std::string& text);

struct DFNConfig {
    int bottleneck_r = 64;
    double gate = 0.1;
    DfnActivation activation = DfnActivation::Relu;
    int n_adapter_layers = 7;  // cls_last_layer mode only
    DfnTapMode tap = DfnTapMode::Blockwise;
};

struct AdapterCell {
    ag::Var down_w, down_b, up_w, up_b;
    DfnActivation activation = DfnActivation::Relu;
    double gate = 0.1;
    int dim = 0;
    int bottleneck = 0;
};

// g * up(act(down(x))); the residual add happens at the attachment site.
ag::Var adapter_forward(const AdapterCell& cell, const ag::Var& x);

// Pathway names in creation order: emo_query, emo_text, au_query, au_text
// (blockwise) or vis_cls, txt_cls (cls_last_layer).
struct DfnState {
    DFNConfig config;
    std::map<std::string, std::vector<AdapterCell>> pathways;

    std::size_t cell_count() const {
        std::size_t n = 0;
        for (const auto& [_, cells] : pathways) n += cells.size();
        return n;
    }
};

// Creates the adapter cells inside the model's parameter store (prefix
// "dfn.") and installs the forward hooks. Up-projections start at zero, so a
// freshly wrapped model computes exactly what the unwrapped one does.
// Throws AlreadyAttached on a second call and ConfigMismatch when the
// bottleneck does not fit the model width.
DfnState attach_dfn(MF2Model& model, const DFNConfig& cfg);

struct FreezeReport {
    std::size_t frozen_param_count = 0;
    std::size_t trainable_param_count = 0;
    std::size_t total_param_count = 0;
    double trainable_fraction = 0.0;
    // group (first name segment) -> (frozen, trainable)
    std::map<std::string, std::pair<std::size_t, std::size_t>> per_group;

    std::string to_json() const;
};

// Marks every backbone parameter non-trainable; adapter cells and task heads
// stay trainable. Throws NotAttached before attach_dfn.
FreezeReport freeze_backbone(MF2Model& model);

// Report over the current requires_grad flags without changing them.
FreezeReport count_freeze_state(const MF2Model& model);

// SHA-256 over every non-adapter, non-head parameter value.
std::string backbone_checksum(const MF2Model& model);

// One optimizer step on the wrapped model. A non-finite loss aborts with
// NaNLoss before any state is touched.
LossReport finetune_step(MF2Model& model, const std::vector<MF2Model::TrainItem>& batch,
                         AdamW& optimizer, double lr, std::uint64_t step_seed);

}  // namespace mf2
