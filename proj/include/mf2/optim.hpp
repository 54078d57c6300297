#pragma once

// Decoupled-weight-decay adaptive moment optimizer over a ParamStore.
// Frozen entries (requires_grad == false) are skipped entirely, so their
// values are bit-identical across steps.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mf2/tensor.hpp"

namespace mf2 {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    long step_count() const { return t_; }

    // lr_override >= 0 replaces the configured rate (warmup schedules).
    void step(ag::ParamStore& params, double lr_override = -1.0) {
        ++t_;
        const double lr = lr_override >= 0.0 ? lr_override : cfg_.lr;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (const auto& e : params.entries()) {
            if (!e.var.defined() || !e.var.requires_grad()) continue;
            const auto& g = e.var.grad();
            if (g.empty()) continue;
            auto& slot = state_[e.name];
            auto& m = slot.first;
            auto& v = slot.second;
            if (m.size() != g.size()) m.assign(g.size(), 0.0);
            if (v.size() != g.size()) v.assign(g.size(), 0.0);
            auto& p = const_cast<ag::Var&>(e.var).value_mut();
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
            }
        }
    }

private:
    AdamWConfig cfg_;
    long t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

// Linear warmup: base * s / warmup for s < warmup, base afterwards.
inline double warmup_lr(double base, long step, long warmup_steps) {
    if (warmup_steps <= 0 || step >= warmup_steps) return base;
    return base * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

}  // namespace mf2
