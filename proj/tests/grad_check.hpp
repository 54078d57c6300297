#pragma once

// Central finite-difference gradient checking used across the test suites.
// The analytic side comes from ag::backward; the numeric side perturbs one
// input entry at a time at float64.

#include <cmath>
#include <functional>
#include <vector>

#include "mf2/tensor.hpp"

namespace mf2::testing {

struct GradCheckResult {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int checked = 0;
};

// f rebuilds the graph from the given leaves and returns a scalar loss.
// Leaves must have requires_grad=true. Coordinates whose true gradient sits
// below float64 finite-difference resolution are compared against a floor
// scaled to the largest gradient seen, the usual rtol+atol convention.
inline GradCheckResult grad_check(const std::function<ag::Var()>& f,
                                  const std::vector<ag::Var>& leaves,
                                  double h = 1e-5) {
    GradCheckResult res;

    ag::Var loss = f();
    ag::backward(loss);
    std::vector<std::vector<double>> analytic;
    double grad_scale = 0.0;
    for (const auto& leaf : leaves) {
        analytic.push_back(leaf.grad());
        for (double g : leaf.grad()) grad_scale = std::max(grad_scale, std::abs(g));
    }
    const double atol = 1e-3 * grad_scale + 1e-12;

    for (std::size_t li = 0; li < leaves.size(); ++li) {
        ag::Var leaf = leaves[li];
        for (std::size_t i = 0; i < leaf.size(); ++i) {
            double orig = leaf.value()[i];
            double step = h * std::max(1.0, std::abs(orig));
            leaf.value_mut()[i] = orig + step;
            double fp = f().scalar();
            leaf.value_mut()[i] = orig - step;
            double fm = f().scalar();
            leaf.value_mut()[i] = orig;
            double numeric = (fp - fm) / (2.0 * step);
            double a = analytic[li].empty() ? 0.0 : analytic[li][i];
            double denom = std::max({std::abs(a), std::abs(numeric), atol});
            double rel = std::abs(a - numeric) / denom;
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
    }

    // Clear the grads we accumulated so later checks start clean.
    for (const auto& leaf : leaves) {
        auto& g = leaf.node()->grad;
        std::fill(g.begin(), g.end(), 0.0);
    }
    return res;
}

}  // namespace mf2::testing
