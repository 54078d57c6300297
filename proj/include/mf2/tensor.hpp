#pragma once

// Reverse-mode autodiff over row-major double matrices. Everything model-side
// runs on this: scalars are [1,1], vectors are [1,C] rows. Graphs are built
// define-by-run through shared_ptr parents and freed when the loss handle
// goes out of scope; long-lived parameter nodes survive across graphs.
//
// Backward only visits nodes with requires_grad set, which is how a frozen
// backbone costs nothing at fine-tuning time.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mf2/common.hpp"

namespace mf2::ag {

struct Node {
    int rows = 0;
    int cols = 0;
    std::vector<double> val;
    std::vector<double> grad;  // sized lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;  // pushes node.grad into parents
    std::string name;                     // set for parameters

    std::size_t size() const { return val.size(); }
    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : node_(std::move(n)) {}

    static Var zeros(int rows, int cols);
    static Var constant(int rows, int cols, std::vector<double> v);
    static Var leaf(int rows, int cols, std::vector<double> v, bool requires_grad,
                    std::string name = "");

    bool defined() const { return node_ != nullptr; }
    int rows() const { return node_->rows; }
    int cols() const { return node_->cols; }
    std::size_t size() const { return node_->size(); }
    double at(int r, int c) const { return node_->val[static_cast<std::size_t>(r) * node_->cols + c]; }
    double scalar() const;
    const std::vector<double>& value() const { return node_->val; }
    std::vector<double>& value_mut() { return node_->val; }
    const std::vector<double>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    const std::string& name() const { return node_->name; }
    NodePtr node() const { return node_; }

private:
    NodePtr node_;
};

// Runs reverse-mode accumulation from a scalar loss. Seeds d(loss)/d(loss)=1,
// zero-fills grads of every reachable grad-requiring node first.
void backward(const Var& loss);

// ---- elementwise / structural ops ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_rowvec(const Var& a, const Var& row);         // row is [1, C]
Var mul_scalar_var(const Var& a, const Var& s);       // s is [1, 1]
Var reciprocal(const Var& a);
Var mul_mask(const Var& a, const std::vector<double>& m);  // constant mask, same size
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, int rows, int cols);
Var gather_rows(const Var& a, const std::vector<int>& idx);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, int r0, int r1);
Var slice_cols(const Var& a, int c0, int c1);
Var sum_all(const Var& a);    // [1,1]
Var mean_rows(const Var& a);  // [1,C]

// Sum of scalar [1,1] terms.
inline Var sum_scalars(const std::vector<Var>& terms) {
    if (terms.empty()) fail(ErrKind::InvalidArgument, "sum_scalars: no terms");
    if (terms.size() == 1) return terms[0];
    return sum_all(concat_rows(terms));
}

// ---- normalized / attention ops ----
// Softmax across each row after adding the constant mask (use large negative
// entries to hide keys). A fully-hidden row is an error upstream.
Var softmax_rows(const Var& a, const std::vector<double>* additive_mask = nullptr);
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-6);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

// ---- losses ----
// Sum over rows of -log softmax(row)[target[row]].
Var nll_rows(const Var& logits, const std::vector<int>& targets);
// Sum of binary cross-entropies; logits flat, labels in {0,1}.
Var bce_with_logits(const Var& logits, const std::vector<double>& labels);

bool all_finite(const Var& a);

// ---- parameter registry ----
// In Materialize mode, add() allocates real leaf nodes. In CountOnly mode it
// just records shapes, so full-scale models can be sized without allocating
// hundreds of millions of doubles.
class ParamStore {
public:
    enum class Mode { Materialize, CountOnly };

    struct Entry {
        std::string name;
        int rows = 0;
        int cols = 0;
        Var var;  // undefined in CountOnly mode
    };

    explicit ParamStore(Mode mode = Mode::Materialize) : mode_(mode) {}

    Mode mode() const { return mode_; }

    Var add(const std::string& name, int rows, int cols,
            const std::function<double(Rng&)>& init, Rng& rng);
    Var add_zeros(const std::string& name, int rows, int cols);

    const std::vector<Entry>& entries() const { return entries_; }
    Var find(const std::string& name) const;

    std::size_t total_count() const;
    std::size_t count_if(const std::function<bool(const Entry&)>& pred) const;
    std::size_t trainable_count() const;

    void set_requires_grad(const std::function<bool(const Entry&)>& pred, bool value);
    void zero_grads();

    // SHA-256 over raw value bytes of entries matching pred, in registry order.
    std::string checksum(const std::function<bool(const Entry&)>& pred) const;
    std::string checksum_all() const;

private:
    Mode mode_;
    std::vector<Entry> entries_;
};

}  // namespace mf2::ag
