#include "mf2/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace mf2::ag {

namespace {

NodePtr make_node(int rows, int cols) {
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->val.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    return n;
}

bool any_requires(const std::vector<NodePtr>& parents) {
    for (const auto& p : parents) {
        if (p->requires_grad) return true;
    }
    return false;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        fail(ErrKind::DimMismatch, std::string(op) + ": shapes differ");
}

}  // namespace

Var Var::zeros(int rows, int cols) { return Var(make_node(rows, cols)); }

Var Var::constant(int rows, int cols, std::vector<double> v) {
    if (v.size() != static_cast<std::size_t>(rows) * cols)
        fail(ErrKind::DimMismatch, "Var::constant: value count mismatch");
    auto n = make_node(rows, cols);
    n->val = std::move(v);
    return Var(n);
}

Var Var::leaf(int rows, int cols, std::vector<double> v, bool requires_grad, std::string name) {
    Var out = constant(rows, cols, std::move(v));
    out.node()->requires_grad = requires_grad;
    out.node()->name = std::move(name);
    return out;
}

double Var::scalar() const {
    if (size() != 1) fail(ErrKind::DimMismatch, "scalar() on non-scalar");
    return node_->val[0];
}

void backward(const Var& loss) {
    if (!loss.defined() || loss.size() != 1)
        fail(ErrKind::DimMismatch, "backward: loss must be a defined scalar");
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS; parent order is structural, so accumulation
    // order is deterministic run to run.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* n;
        std::size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get()});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    for (Node* n : order) n->ensure_grad();
    std::fill(loss.node()->grad.begin(), loss.node()->grad.end(), 0.0);
    loss.node()->grad[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    auto n = make_node(a.rows(), a.cols());
    for (std::size_t i = 0; i < n->size(); ++i) n->val[i] = a.value()[i] + b.value()[i];
    n->parents = {a.node(), b.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            for (int k = 0; k < 2; ++k) {
                Node* p = self.parents[k].get();
                if (!p->requires_grad) continue;
                p->ensure_grad();
                for (std::size_t i = 0; i < self.size(); ++i) p->grad[i] += self.grad[i];
            }
        };
    }
    return Var(n);
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    auto n = make_node(a.rows(), a.cols());
    for (std::size_t i = 0; i < n->size(); ++i) n->val[i] = a.value()[i] - b.value()[i];
    n->parents = {a.node(), b.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node* pa = self.parents[0].get();
            Node* pb = self.parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < self.size(); ++i) pb->grad[i] -= self.grad[i];
            }
        };
    }
    return Var(n);
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    auto n = make_node(a.rows(), a.cols());
    for (std::size_t i = 0; i < n->size(); ++i) n->val[i] = a.value()[i] * b.value()[i];
    n->parents = {a.node(), b.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node* pa = self.parents[0].get();
            Node* pb = self.parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i] * pb->val[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < self.size(); ++i) pb->grad[i] += self.grad[i] * pa->val[i];
            }
        };
    }
    return Var(n);
}

Var scale(const Var& a, double s) {
    auto n = make_node(a.rows(), a.cols());
    for (std::size_t i = 0; i < n->size(); ++i) n->val[i] = a.value()[i] * s;
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [s](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < self.size(); ++i) p->grad[i] += self.grad[i] * s;
        };
    }
    return Var(n);
}

Var add_rowvec(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols())
        fail(ErrKind::DimMismatch, "add_rowvec: row must be [1, cols(a)]");
    auto n = make_node(a.rows(), a.cols());
    const int C = a.cols();
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < C; ++c)
            n->val[static_cast<std::size_t>(r) * C + c] =
                a.value()[static_cast<std::size_t>(r) * C + c] + row.value()[c];
    n->parents = {a.node(), row.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [C](Node& self) {
            Node* pa = self.parents[0].get();
            Node* pr = self.parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
            }
            if (pr->requires_grad) {
                pr->ensure_grad();
                for (int r = 0; r < self.rows; ++r)
                    for (int c = 0; c < C; ++c)
                        pr->grad[c] += self.grad[static_cast<std::size_t>(r) * C + c];
            }
        };
    }
    return Var(n);
}

Var mul_scalar_var(const Var& a, const Var& s) {
    if (s.size() != 1) fail(ErrKind::DimMismatch, "mul_scalar_var: s must be [1,1]");
    auto n = make_node(a.rows(), a.cols());
    const double sv = s.value()[0];
    for (std::size_t i = 0; i < n->size(); ++i) n->val[i] = a.value()[i] * sv;
    n->parents = {a.node(), s.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node* pa = self.parents[0].get();
            Node* ps = self.parents[1].get();
            const double sv = ps->val[0];
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i] * sv;
            }
            if (ps->requires_grad) {
                ps->ensure_grad();
                double acc = 0.0;
                for (std::size_t i = 0; i < self.size(); ++i) acc += self.grad[i] * pa->val[i];
                ps->grad[0] += acc;
            }
        };
    }
    return Var(n);
}

Var reciprocal(const Var& a) {
    auto n = make_node(a.rows(), a.cols());
    for (std::size_t i = 0; i < n->size(); ++i) n->val[i] = 1.0 / a.value()[i];
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < self.size(); ++i) {
                double y = self.val[i];
                p->grad[i] += -self.grad[i] * y * y;
            }
        };
    }
    return Var(n);
}

Var mul_mask(const Var& a, const std::vector<double>& m) {
    if (m.size() != a.size()) fail(ErrKind::DimMismatch, "mul_mask: mask size mismatch");
    auto n = make_node(a.rows(), a.cols());
    for (std::size_t i = 0; i < n->size(); ++i) n->val[i] = a.value()[i] * m[i];
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [m](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < self.size(); ++i) p->grad[i] += self.grad[i] * m[i];
        };
    }
    return Var(n);
}

Var relu(const Var& a) {
    auto n = make_node(a.rows(), a.cols());
    for (std::size_t i = 0; i < n->size(); ++i) n->val[i] = a.value()[i] > 0.0 ? a.value()[i] : 0.0;
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < self.size(); ++i)
                if (p->val[i] > 0.0) p->grad[i] += self.grad[i];
        };
    }
    return Var(n);
}

Var sigmoid(const Var& a) {
    auto n = make_node(a.rows(), a.cols());
    for (std::size_t i = 0; i < n->size(); ++i) {
        double x = a.value()[i];
        n->val[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < self.size(); ++i) {
                double y = self.val[i];
                p->grad[i] += self.grad[i] * y * (1.0 - y);
            }
        };
    }
    return Var(n);
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) fail(ErrKind::DimMismatch, "matmul: inner dims differ");
    const int M = a.rows(), K = a.cols(), N = b.cols();
    auto n = make_node(M, N);
    const double* av = a.value().data();
    const double* bv = b.value().data();
    double* ov = n->val.data();
    for (int i = 0; i < M; ++i) {
        for (int k = 0; k < K; ++k) {
            double aik = av[static_cast<std::size_t>(i) * K + k];
            if (aik == 0.0) continue;
            const double* brow = bv + static_cast<std::size_t>(k) * N;
            double* orow = ov + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) orow[j] += aik * brow[j];
        }
    }
    n->parents = {a.node(), b.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [M, K, N](Node& self) {
            Node* pa = self.parents[0].get();
            Node* pb = self.parents[1].get();
            const double* g = self.grad.data();
            if (pa->requires_grad) {
                pa->ensure_grad();
                // dA = G * B^T
                for (int i = 0; i < M; ++i)
                    for (int k = 0; k < K; ++k) {
                        double acc = 0.0;
                        const double* grow = g + static_cast<std::size_t>(i) * N;
                        const double* brow = pb->val.data() + static_cast<std::size_t>(k) * N;
                        for (int j = 0; j < N; ++j) acc += grow[j] * brow[j];
                        pa->grad[static_cast<std::size_t>(i) * K + k] += acc;
                    }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                // dB = A^T * G
                for (int i = 0; i < M; ++i) {
                    const double* arow = pa->val.data() + static_cast<std::size_t>(i) * K;
                    const double* grow = g + static_cast<std::size_t>(i) * N;
                    for (int k = 0; k < K; ++k) {
                        double aik = arow[k];
                        if (aik == 0.0) continue;
                        double* brow = pb->grad.data() + static_cast<std::size_t>(k) * N;
                        for (int j = 0; j < N; ++j) brow[j] += aik * grow[j];
                    }
                }
            }
        };
    }
    return Var(n);
}

Var transpose(const Var& a) {
    const int R = a.rows(), C = a.cols();
    auto n = make_node(C, R);
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
            n->val[static_cast<std::size_t>(c) * R + r] = a.value()[static_cast<std::size_t>(r) * C + c];
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [R, C](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c)
                    p->grad[static_cast<std::size_t>(r) * C + c] +=
                        self.grad[static_cast<std::size_t>(c) * R + r];
        };
    }
    return Var(n);
}

Var reshape(const Var& a, int rows, int cols) {
    if (static_cast<std::size_t>(rows) * cols != a.size())
        fail(ErrKind::DimMismatch, "reshape: element count mismatch");
    auto n = make_node(rows, cols);
    n->val = a.value();
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < self.size(); ++i) p->grad[i] += self.grad[i];
        };
    }
    return Var(n);
}

Var gather_rows(const Var& a, const std::vector<int>& idx) {
    const int C = a.cols();
    for (int i : idx)
        if (i < 0 || i >= a.rows()) fail(ErrKind::DimMismatch, "gather_rows: index out of range");
    auto n = make_node(static_cast<int>(idx.size()), C);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(a.value().data() + static_cast<std::size_t>(idx[r]) * C, C,
                    n->val.data() + r * C);
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [idx, C](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r) {
                double* dst = p->grad.data() + static_cast<std::size_t>(idx[r]) * C;
                const double* src = self.grad.data() + r * C;
                for (int c = 0; c < C; ++c) dst[c] += src[c];
            }
        };
    }
    return Var(n);
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) fail(ErrKind::DimMismatch, "concat_rows: empty");
    const int C = parts[0].cols();
    int R = 0;
    for (const auto& p : parts) {
        if (p.cols() != C) fail(ErrKind::DimMismatch, "concat_rows: col mismatch");
        R += p.rows();
    }
    auto n = make_node(R, C);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().begin(), p.value().end(), n->val.begin() + off);
        off += p.size();
        n->parents.push_back(p.node());
    }
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            std::size_t off = 0;
            for (auto& par : self.parents) {
                if (par->requires_grad) {
                    par->ensure_grad();
                    for (std::size_t i = 0; i < par->val.size(); ++i)
                        par->grad[i] += self.grad[off + i];
                }
                off += par->val.size();
            }
        };
    }
    return Var(n);
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) fail(ErrKind::DimMismatch, "concat_cols: empty");
    const int R = parts[0].rows();
    int C = 0;
    for (const auto& p : parts) {
        if (p.rows() != R) fail(ErrKind::DimMismatch, "concat_cols: row mismatch");
        C += p.cols();
    }
    auto n = make_node(R, C);
    int coff = 0;
    for (const auto& p : parts) {
        for (int r = 0; r < R; ++r)
            std::copy_n(p.value().data() + static_cast<std::size_t>(r) * p.cols(), p.cols(),
                        n->val.data() + static_cast<std::size_t>(r) * C + coff);
        coff += p.cols();
        n->parents.push_back(p.node());
    }
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [R, C](Node& self) {
            int coff = 0;
            for (auto& par : self.parents) {
                const int pc = par->cols;
                if (par->requires_grad) {
                    par->ensure_grad();
                    for (int r = 0; r < R; ++r)
                        for (int c = 0; c < pc; ++c)
                            par->grad[static_cast<std::size_t>(r) * pc + c] +=
                                self.grad[static_cast<std::size_t>(r) * C + coff + c];
                }
                coff += pc;
            }
        };
    }
    return Var(n);
}

Var slice_rows(const Var& a, int r0, int r1) {
    if (r0 < 0 || r1 > a.rows() || r0 >= r1) fail(ErrKind::DimMismatch, "slice_rows: bad range");
    const int C = a.cols();
    auto n = make_node(r1 - r0, C);
    std::copy_n(a.value().data() + static_cast<std::size_t>(r0) * C,
                static_cast<std::size_t>(r1 - r0) * C, n->val.data());
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [r0, C](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < self.size(); ++i)
                p->grad[static_cast<std::size_t>(r0) * C + i] += self.grad[i];
        };
    }
    return Var(n);
}

Var slice_cols(const Var& a, int c0, int c1) {
    if (c0 < 0 || c1 > a.cols() || c0 >= c1) fail(ErrKind::DimMismatch, "slice_cols: bad range");
    const int R = a.rows(), C = a.cols(), W = c1 - c0;
    auto n = make_node(R, W);
    for (int r = 0; r < R; ++r)
        std::copy_n(a.value().data() + static_cast<std::size_t>(r) * C + c0, W,
                    n->val.data() + static_cast<std::size_t>(r) * W);
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [c0, C, W](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (int r = 0; r < self.rows; ++r)
                for (int c = 0; c < W; ++c)
                    p->grad[static_cast<std::size_t>(r) * C + c0 + c] +=
                        self.grad[static_cast<std::size_t>(r) * W + c];
        };
    }
    return Var(n);
}

Var sum_all(const Var& a) {
    auto n = make_node(1, 1);
    double acc = 0.0;
    for (double v : a.value()) acc += v;
    n->val[0] = acc;
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < p->val.size(); ++i) p->grad[i] += self.grad[0];
        };
    }
    return Var(n);
}

Var mean_rows(const Var& a) {
    const int R = a.rows(), C = a.cols();
    auto n = make_node(1, C);
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) n->val[c] += a.value()[static_cast<std::size_t>(r) * C + c];
    for (int c = 0; c < C; ++c) n->val[c] /= R;
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [R, C](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c)
                    p->grad[static_cast<std::size_t>(r) * C + c] += self.grad[c] / R;
        };
    }
    return Var(n);
}

Var softmax_rows(const Var& a, const std::vector<double>* additive_mask) {
    if (additive_mask && additive_mask->size() != a.size())
        fail(ErrKind::DimMismatch, "softmax_rows: mask size mismatch");
    const int R = a.rows(), C = a.cols();
    auto n = make_node(R, C);
    for (int r = 0; r < R; ++r) {
        const double* x = a.value().data() + static_cast<std::size_t>(r) * C;
        const double* m = additive_mask ? additive_mask->data() + static_cast<std::size_t>(r) * C : nullptr;
        double mx = -1e300;
        for (int c = 0; c < C; ++c) {
            double v = x[c] + (m ? m[c] : 0.0);
            if (v > mx) mx = v;
        }
        double denom = 0.0;
        double* y = n->val.data() + static_cast<std::size_t>(r) * C;
        for (int c = 0; c < C; ++c) {
            double v = x[c] + (m ? m[c] : 0.0);
            y[c] = std::exp(v - mx);
            denom += y[c];
        }
        for (int c = 0; c < C; ++c) y[c] /= denom;
    }
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [R, C](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (int r = 0; r < R; ++r) {
                const double* y = self.val.data() + static_cast<std::size_t>(r) * C;
                const double* g = self.grad.data() + static_cast<std::size_t>(r) * C;
                double dot = 0.0;
                for (int c = 0; c < C; ++c) dot += y[c] * g[c];
                double* pg = p->grad.data() + static_cast<std::size_t>(r) * C;
                for (int c = 0; c < C; ++c) pg[c] += y[c] * (g[c] - dot);
            }
        };
    }
    return Var(n);
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
    if (gamma.rows() != 1 || gamma.cols() != a.cols() || beta.rows() != 1 || beta.cols() != a.cols())
        fail(ErrKind::DimMismatch, "layer_norm_rows: affine params must be [1, cols]");
    const int R = a.rows(), C = a.cols();
    auto n = make_node(R, C);
    // Stash per-row mean and inverse stddev for backward.
    auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(R) * 2);
    for (int r = 0; r < R; ++r) {
        const double* x = a.value().data() + static_cast<std::size_t>(r) * C;
        double mean = 0.0;
        for (int c = 0; c < C; ++c) mean += x[c];
        mean /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) var += (x[c] - mean) * (x[c] - mean);
        var /= C;
        double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[r * 2] = mean;
        (*stats)[r * 2 + 1] = inv;
        double* y = n->val.data() + static_cast<std::size_t>(r) * C;
        for (int c = 0; c < C; ++c) y[c] = (x[c] - mean) * inv * gamma.value()[c] + beta.value()[c];
    }
    n->parents = {a.node(), gamma.node(), beta.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [R, C, stats](Node& self) {
            Node* px = self.parents[0].get();
            Node* pg = self.parents[1].get();
            Node* pb = self.parents[2].get();
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (int r = 0; r < R; ++r) {
                const double mean = (*stats)[r * 2];
                const double inv = (*stats)[r * 2 + 1];
                const double* x = px->val.data() + static_cast<std::size_t>(r) * C;
                const double* g = self.grad.data() + static_cast<std::size_t>(r) * C;
                if (pb->requires_grad)
                    for (int c = 0; c < C; ++c) pb->grad[c] += g[c];
                if (pg->requires_grad)
                    for (int c = 0; c < C; ++c) pg->grad[c] += g[c] * (x[c] - mean) * inv;
                if (px->requires_grad) {
                    // dL/dx via normalized-value intermediate.
                    double sum_gh = 0.0, sum_gh_xhat = 0.0;
                    for (int c = 0; c < C; ++c) {
                        double gh = g[c] * pg->val[c];
                        double xhat = (x[c] - mean) * inv;
                        sum_gh += gh;
                        sum_gh_xhat += gh * xhat;
                    }
                    double* xg = px->grad.data() + static_cast<std::size_t>(r) * C;
                    for (int c = 0; c < C; ++c) {
                        double gh = g[c] * pg->val[c];
                        double xhat = (x[c] - mean) * inv;
                        xg[c] += inv * (gh - sum_gh / C - xhat * sum_gh_xhat / C);
                    }
                }
            }
        };
    }
    return Var(n);
}

Var l2_normalize_rows(const Var& a, double eps) {
    const int R = a.rows(), C = a.cols();
    auto n = make_node(R, C);
    auto norms = std::make_shared<std::vector<double>>(R);
    for (int r = 0; r < R; ++r) {
        const double* x = a.value().data() + static_cast<std::size_t>(r) * C;
        double sq = 0.0;
        for (int c = 0; c < C; ++c) sq += x[c] * x[c];
        double nr = std::sqrt(sq + eps);
        (*norms)[r] = nr;
        double* y = n->val.data() + static_cast<std::size_t>(r) * C;
        for (int c = 0; c < C; ++c) y[c] = x[c] / nr;
    }
    n->parents = {a.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [R, C, norms](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (int r = 0; r < R; ++r) {
                const double* y = self.val.data() + static_cast<std::size_t>(r) * C;
                const double* g = self.grad.data() + static_cast<std::size_t>(r) * C;
                double dot = 0.0;
                for (int c = 0; c < C; ++c) dot += y[c] * g[c];
                double* pg = p->grad.data() + static_cast<std::size_t>(r) * C;
                double nr = (*norms)[r];
                for (int c = 0; c < C; ++c) pg[c] += (g[c] - y[c] * dot) / nr;
            }
        };
    }
    return Var(n);
}

Var nll_rows(const Var& logits, const std::vector<int>& targets) {
    const int R = logits.rows(), C = logits.cols();
    if (static_cast<int>(targets.size()) != R)
        fail(ErrKind::LabelMismatch, "nll_rows: target count != rows");
    for (int t : targets)
        if (t < 0 || t >= C) fail(ErrKind::UnknownClassId, "nll_rows: target out of range");
    auto n = make_node(1, 1);
    double loss = 0.0;
    for (int r = 0; r < R; ++r) {
        const double* x = logits.value().data() + static_cast<std::size_t>(r) * C;
        double mx = x[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, x[c]);
        double lse = 0.0;
        for (int c = 0; c < C; ++c) lse += std::exp(x[c] - mx);
        lse = mx + std::log(lse);
        loss += lse - x[targets[r]];
    }
    n->val[0] = loss;
    n->parents = {logits.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [R, C, targets](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            const double g = self.grad[0];
            for (int r = 0; r < R; ++r) {
                const double* x = p->val.data() + static_cast<std::size_t>(r) * C;
                double mx = x[0];
                for (int c = 1; c < C; ++c) mx = std::max(mx, x[c]);
                double denom = 0.0;
                for (int c = 0; c < C; ++c) denom += std::exp(x[c] - mx);
                double* pg = p->grad.data() + static_cast<std::size_t>(r) * C;
                for (int c = 0; c < C; ++c) {
                    double soft = std::exp(x[c] - mx) / denom;
                    pg[c] += g * (soft - (c == targets[r] ? 1.0 : 0.0));
                }
            }
        };
    }
    return Var(n);
}

Var bce_with_logits(const Var& logits, const std::vector<double>& labels) {
    if (labels.size() != logits.size())
        fail(ErrKind::LabelMismatch, "bce_with_logits: label count mismatch");
    for (double y : labels)
        if (y != 0.0 && y != 1.0) fail(ErrKind::NonBinary, "bce_with_logits: label not in {0,1}");
    auto n = make_node(1, 1);
    double loss = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        double l = logits.value()[i];
        double y = labels[i];
        // max(l,0) - y*l + log(1+exp(-|l|))
        loss += std::max(l, 0.0) - y * l + std::log1p(std::exp(-std::abs(l)));
    }
    n->val[0] = loss;
    n->parents = {logits.node()};
    n->requires_grad = any_requires(n->parents);
    if (n->requires_grad) {
        n->backward = [labels](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            const double g = self.grad[0];
            for (std::size_t i = 0; i < labels.size(); ++i) {
                double l = p->val[i];
                double s = l >= 0.0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
                p->grad[i] += g * (s - labels[i]);
            }
        };
    }
    return Var(n);
}

bool all_finite(const Var& a) {
    for (double v : a.value())
        if (!std::isfinite(v)) return false;
    return true;
}

// ---------------------------------------------------------------------------

Var ParamStore::add(const std::string& name, int rows, int cols,
                    const std::function<double(Rng&)>& init, Rng& rng) {
    for (const auto& e : entries_)
        if (e.name == name) fail(ErrKind::InvalidArgument, "duplicate parameter name: " + name);
    Entry e;
    e.name = name;
    e.rows = rows;
    e.cols = cols;
    if (mode_ == Mode::Materialize) {
        std::vector<double> v(static_cast<std::size_t>(rows) * cols);
        for (auto& x : v) x = init(rng);
        e.var = Var::leaf(rows, cols, std::move(v), true, name);
    }
    entries_.push_back(e);
    return e.var;
}

Var ParamStore::add_zeros(const std::string& name, int rows, int cols) {
    Rng dummy(1);
    return add(name, rows, cols, [](Rng&) { return 0.0; }, dummy);
}

Var ParamStore::find(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e.var;
    fail(ErrKind::InvalidArgument, "parameter not found: " + name);
}

std::size_t ParamStore::total_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.rows) * e.cols;
    return n;
}

std::size_t ParamStore::count_if(const std::function<bool(const Entry&)>& pred) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
        if (pred(e)) n += static_cast<std::size_t>(e.rows) * e.cols;
    return n;
}

std::size_t ParamStore::trainable_count() const {
    if (mode_ == Mode::CountOnly) fail(ErrKind::InvalidArgument, "trainable_count in CountOnly mode");
    return count_if([](const Entry& e) { return e.var.requires_grad(); });
}

void ParamStore::set_requires_grad(const std::function<bool(const Entry&)>& pred, bool value) {
    for (auto& e : entries_)
        if (e.var.defined() && pred(e)) e.var.set_requires_grad(value);
}

void ParamStore::zero_grads() {
    for (auto& e : entries_) {
        if (!e.var.defined()) continue;
        auto& g = e.var.node()->grad;
        std::fill(g.begin(), g.end(), 0.0);
    }
}

std::string ParamStore::checksum(const std::function<bool(const Entry&)>& pred) const {
    std::string bytes;
    for (const auto& e : entries_) {
        if (!e.var.defined() || !pred(e)) continue;
        bytes.append(e.name);
        const auto& v = e.var.value();
        const char* p = reinterpret_cast<const char*>(v.data());
        bytes.append(p, v.size() * sizeof(double));
    }
    return sha256_hex(bytes);
}

std::string ParamStore::checksum_all() const {
    return checksum([](const Entry&) { return true; });
}

}  // namespace mf2::ag
