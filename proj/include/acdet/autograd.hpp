#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_set>

#include "acdet/tensor.hpp"

namespace acdet {

// ============================================================================
// Reverse-mode autodiff on a dynamically built graph.
//
// Every op returns a Var holding a shared Node. Backward walks the graph in
// reverse topological order and accumulates gradients into leaf nodes
// (parameters). Graphs are rebuilt each forward pass and freed when the last
// Var referencing them goes out of scope.
// ============================================================================

class Node;

struct Var {
    std::shared_ptr<Node> n;

    bool defined() const { return static_cast<bool>(n); }
    const Tensor& value() const;
    Tensor& grad() const;
    bool requires_grad() const;
};

class Node {
public:
    Tensor value;
    Tensor grad;  // empty until backward touches this node
    bool requires_grad = false;
    std::vector<Var> inputs;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (grad.data.empty()) grad = Tensor(value.shape);
        return grad;
    }
    bool has_grad() const { return !grad.data.empty(); }
};

inline const Tensor& Var::value() const { return n->value; }
inline Tensor& Var::grad() const { return n->grad; }
inline bool Var::requires_grad() const { return n && n->requires_grad; }

// Thread-local switch; inside a NoGradGuard all ops produce constants.
struct GradMode {
    static bool& enabled() {
        thread_local bool e = true;
        return e;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return Var{n};
}

/// A trainable parameter: gradient is accumulated here during backward.
inline Var leaf(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var{n};
}

inline Var detach(const Var& v) { return constant(v.value()); }

inline void clear_grad(const Var& v) { v.n->grad = Tensor(); }

inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (GradMode::enabled()) {
        bool rg = false;
        for (const auto& i : inputs) rg = rg || i.requires_grad();
        if (rg) {
            n->requires_grad = true;
            n->inputs = std::move(inputs);
            n->backward_fn = std::move(bw);
        }
    }
    return Var{n};
}

inline void backward(const Var& loss) {
    if (loss.value().numel() != 1)
        throw ConfigError("backward expects a scalar loss, got " + shape_str(loss.value().shape));
    if (!loss.requires_grad()) return;

    // iterative post-order DFS over grad-requiring nodes
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* node;
        size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.n.get()});
    visited.insert(loss.n.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->inputs.size()) {
            Node* child = f.node->inputs[f.next++].n.get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.push_back({child});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.n->ensure_grad().data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
    }
}

// ============================================================================
// Eigen helpers
// ============================================================================

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

inline MapM map2d(Tensor& t, int rows, int cols) { return MapM(t.data.data(), rows, cols); }
inline CMapM cmap2d(const Tensor& t, int rows, int cols) {
    return CMapM(t.data.data(), rows, cols);
}

// ============================================================================
// Elementwise / broadcast ops
// ============================================================================

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
}

inline Var add(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node* in = self.inputs[k].n.get();
            if (!in->requires_grad) continue;
            Tensor& g = in->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        Node* pa = self.inputs[0].n.get();
        Node* pb = self.inputs[1].n.get();
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        Node* pa = self.inputs[0].n.get();
        Node* pb = self.inputs[1].n.get();
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

inline Var div_elem(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "div");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        Node* pa = self.inputs[0].n.get();
        Node* pb = self.inputs[1].n.get();
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            double bi = pb->value[i];
            if (pa->requires_grad) pa->ensure_grad()[i] += self.grad[i] / bi;
            if (pb->requires_grad)
                pb->ensure_grad()[i] -= self.grad[i] * pa->value[i] / (bi * bi);
        }
    });
}

inline Var neg(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data) v = -v;
    return make_op(std::move(out), {a}, [](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    });
}

inline Var mul_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.data) v *= s;
    return make_op(std::move(out), {a}, [s](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.data) v += s;
    return make_op(std::move(out), {a}, [](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

/// x: [N,D], b: [D] broadcast over rows.
inline Var add_rowvec(const Var& x, const Var& b) {
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (xv.rank() != 2 || bv.numel() != xv.cols())
        throw ConfigError("add_rowvec: incompatible shapes");
    Tensor out = xv;
    int N = xv.rows(), D = xv.cols();
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < D; ++c) out.at(r, c) += bv[c];
    return make_op(std::move(out), {x, b}, [N, D](Node& self) {
        Node* px = self.inputs[0].n.get();
        Node* pb = self.inputs[1].n.get();
        if (px->requires_grad) {
            Tensor& g = px->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->ensure_grad();
            for (int r = 0; r < N; ++r)
                for (int c = 0; c < D; ++c) g[c] += self.grad.at(r, c);
        }
    });
}

// ============================================================================
// Nonlinearities
// ============================================================================

inline Var relu(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
    return make_op(std::move(out), {a}, [](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i)
            if (p->value[i] > 0.0) g[i] += self.grad[i];
    });
}

inline Var tanh_op(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data) v = std::tanh(v);
    return make_op(std::move(out), {a}, [](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i)
            g[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return make_op(std::move(out), {a}, [](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) {
            double s = self.value[i];
            g[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

/// log(max(x, eps)); zero gradient in the clamped region.
inline Var log_clamped(const Var& a, double eps = 1e-8) {
    Tensor out = a.value();
    for (auto& v : out.data) v = std::log(std::max(v, eps));
    return make_op(std::move(out), {a}, [eps](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i)
            if (p->value[i] > eps) g[i] += self.grad[i] / p->value[i];
    });
}

/// Hard clamp with elementwise bounds; gradient is zero outside [lo, hi].
inline Var clamp_elem(const Var& a, Tensor lo, Tensor hi) {
    check_same_shape(a.value(), lo, "clamp");
    check_same_shape(a.value(), hi, "clamp");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], lo[i], hi[i]);
    auto plo = std::make_shared<Tensor>(std::move(lo));
    auto phi = std::make_shared<Tensor>(std::move(hi));
    return make_op(std::move(out), {a}, [plo, phi](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) {
            double x = p->value[i];
            if (x >= (*plo)[i] && x <= (*phi)[i]) g[i] += self.grad[i];
        }
    });
}

// ============================================================================
// Linear algebra
// ============================================================================

inline Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows())
        throw ConfigError("matmul: incompatible shapes " + shape_str(av.shape) + " x " +
                          shape_str(bv.shape));
    int N = av.rows(), K = av.cols(), M = bv.cols();
    Tensor out({N, M});
    map2d(out, N, M).noalias() = cmap2d(av, N, K) * cmap2d(bv, K, M);
    return make_op(std::move(out), {a, b}, [N, K, M](Node& self) {
        Node* pa = self.inputs[0].n.get();
        Node* pb = self.inputs[1].n.get();
        CMapM g = cmap2d(self.grad, N, M);
        if (pa->requires_grad)
            map2d(pa->ensure_grad(), N, K).noalias() += g * cmap2d(pb->value, K, M).transpose();
        if (pb->requires_grad)
            map2d(pb->ensure_grad(), K, M).noalias() += cmap2d(pa->value, N, K).transpose() * g;
    });
}

inline Var transpose(const Var& a) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw ConfigError("transpose expects rank 2");
    int N = av.rows(), M = av.cols();
    Tensor out({M, N});
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < M; ++c) out.at(c, r) = av.at(r, c);
    return make_op(std::move(out), {a}, [N, M](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < M; ++c) g.at(r, c) += self.grad.at(c, r);
    });
}

// ============================================================================
// Reductions / reshaping / indexing
// ============================================================================

inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    return make_op(Tensor({1}, {s}), {a}, [](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        double gs = self.grad[0];
        for (auto& v : g.data) v += gs;
    });
}

/// Mean over rows: [N,D] -> [D].
inline Var mean_rows(const Var& a) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw ConfigError("mean_rows expects rank 2");
    int N = av.rows(), D = av.cols();
    Tensor out({D});
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < D; ++c) out[c] += av.at(r, c);
    for (auto& v : out.data) v /= N;
    return make_op(std::move(out), {a}, [N, D](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < D; ++c) g.at(r, c) += self.grad[c] / N;
    });
}

inline Var reshape(const Var& a, Shape s) {
    if (numel_of(s) != a.value().numel())
        throw ConfigError("reshape: element count mismatch");
    Tensor out(std::move(s), a.value().data);
    return make_op(std::move(out), {a}, [](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

inline Var slice_rows(const Var& a, int start, int count) {
    const Tensor& av = a.value();
    if (av.rank() != 2 || start < 0 || start + count > av.rows())
        throw ConfigError("slice_rows: out of range");
    int D = av.cols();
    Tensor out({count, D});
    std::copy(av.data.begin() + static_cast<size_t>(start) * D,
              av.data.begin() + static_cast<size_t>(start + count) * D, out.data.begin());
    return make_op(std::move(out), {a}, [start, count, D](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int r = 0; r < count; ++r)
            for (int c = 0; c < D; ++c) g.at(start + r, c) += self.grad.at(r, c);
    });
}

inline Var gather_rows(const Var& a, std::vector<int> idx) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw ConfigError("gather_rows expects rank 2");
    int D = av.cols();
    Tensor out({static_cast<int>(idx.size()), D});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= av.rows()) throw ConfigError("gather_rows: index out of range");
        for (int c = 0; c < D; ++c) out.at(static_cast<int>(i), c) = av.at(idx[i], c);
    }
    auto pidx = std::make_shared<std::vector<int>>(std::move(idx));
    return make_op(std::move(out), {a}, [pidx, D](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (size_t i = 0; i < pidx->size(); ++i)
            for (int c = 0; c < D; ++c)
                g.at((*pidx)[i], c) += self.grad.at(static_cast<int>(i), c);
    });
}

inline Var slice_cols(const Var& a, int start, int count) {
    const Tensor& av = a.value();
    if (av.rank() != 2 || start < 0 || start + count > av.cols())
        throw ConfigError("slice_cols: out of range");
    int N = av.rows();
    Tensor out({N, count});
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < count; ++c) out.at(r, c) = av.at(r, start + c);
    return make_op(std::move(out), {a}, [start, count, N](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < count; ++c) g.at(r, start + c) += self.grad.at(r, c);
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ConfigError("concat_rows: empty input");
    int D = parts[0].value().cols();
    int N = 0;
    for (const auto& p : parts) {
        if (p.value().rank() != 2 || p.value().cols() != D)
            throw ConfigError("concat_rows: column mismatch");
        N += p.value().rows();
    }
    Tensor out({N, D});
    int r0 = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(),
                  out.data.begin() + static_cast<size_t>(r0) * D);
        r0 += p.value().rows();
    }
    return make_op(std::move(out), parts, [D](Node& self) {
        int r0 = 0;
        for (auto& in : self.inputs) {
            Node* p = in.n.get();
            int rows = p->value.rows();
            if (p->requires_grad) {
                Tensor& g = p->ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < D; ++c) g.at(r, c) += self.grad.at(r0 + r, c);
            }
            r0 += rows;
        }
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ConfigError("concat_cols: empty input");
    int N = parts[0].value().rows();
    int D = 0;
    for (const auto& p : parts) {
        if (p.value().rank() != 2 || p.value().rows() != N)
            throw ConfigError("concat_cols: row mismatch");
        D += p.value().cols();
    }
    Tensor out({N, D});
    int c0 = 0;
    for (const auto& p : parts) {
        int pc = p.value().cols();
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < pc; ++c) out.at(r, c0 + c) = p.value().at(r, c);
        c0 += pc;
    }
    return make_op(std::move(out), parts, [N](Node& self) {
        int c0 = 0;
        for (auto& in : self.inputs) {
            Node* p = in.n.get();
            int pc = p->value.cols();
            if (p->requires_grad) {
                Tensor& g = p->ensure_grad();
                for (int r = 0; r < N; ++r)
                    for (int c = 0; c < pc; ++c) g.at(r, c) += self.grad.at(r, c0 + c);
            }
            c0 += pc;
        }
    });
}

/// Rank-agnostic flat slice, result is rank 1.
inline Var slice_flat(const Var& a, int64_t start, int64_t len) {
    if (start < 0 || start + len > a.value().numel()) throw ConfigError("slice_flat: out of range");
    Tensor out({static_cast<int>(len)});
    std::copy(a.value().data.begin() + start, a.value().data.begin() + start + len,
              out.data.begin());
    return make_op(std::move(out), {a}, [start, len](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int64_t i = 0; i < len; ++i) g[start + i] += self.grad[i];
    });
}

inline Var concat_flat(const std::vector<Var>& parts) {
    int64_t n = 0;
    for (const auto& p : parts) n += p.value().numel();
    Tensor out({static_cast<int>(n)});
    int64_t o = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + o);
        o += p.value().numel();
    }
    return make_op(std::move(out), parts, [](Node& self) {
        int64_t o = 0;
        for (auto& in : self.inputs) {
            Node* p = in.n.get();
            int64_t pn = p->value.numel();
            if (p->requires_grad) {
                Tensor& g = p->ensure_grad();
                for (int64_t i = 0; i < pn; ++i) g[i] += self.grad[o + i];
            }
            o += pn;
        }
    });
}

// ============================================================================
// Softmax / layer norm
// ============================================================================

inline Var softmax_rows(const Var& a) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw ConfigError("softmax_rows expects rank 2");
    int N = av.rows(), D = av.cols();
    Tensor out = av;
    for (int r = 0; r < N; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < D; ++c) mx = std::max(mx, out.at(r, c));
        double s = 0.0;
        for (int c = 0; c < D; ++c) {
            double e = std::exp(out.at(r, c) - mx);
            out.at(r, c) = e;
            s += e;
        }
        for (int c = 0; c < D; ++c) out.at(r, c) /= s;
    }
    return make_op(std::move(out), {a}, [N, D](Node& self) {
        Node* p = self.inputs[0].n.get();
        if (!p->requires_grad) return;
        Tensor& g = p->ensure_grad();
        for (int r = 0; r < N; ++r) {
            double dot = 0.0;
            for (int c = 0; c < D; ++c) dot += self.grad.at(r, c) * self.value.at(r, c);
            for (int c = 0; c < D; ++c)
                g.at(r, c) += self.value.at(r, c) * (self.grad.at(r, c) - dot);
        }
    });
}

/// Per-row layer norm with affine parameters gamma/beta of size D.
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw ConfigError("layer_norm_rows expects rank 2");
    int N = xv.rows(), D = xv.cols();
    if (gamma.value().numel() != D || beta.value().numel() != D)
        throw ConfigError("layer_norm_rows: gamma/beta size mismatch");
    auto xhat = std::make_shared<Tensor>(Shape{N, D});
    auto inv_std = std::make_shared<Tensor>(Shape{N});
    Tensor out({N, D});
    for (int r = 0; r < N; ++r) {
        double mu = 0.0;
        for (int c = 0; c < D; ++c) mu += xv.at(r, c);
        mu /= D;
        double var = 0.0;
        for (int c = 0; c < D; ++c) {
            double d = xv.at(r, c) - mu;
            var += d * d;
        }
        var /= D;
        double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = istd;
        for (int c = 0; c < D; ++c) {
            double xh = (xv.at(r, c) - mu) * istd;
            xhat->at(r, c) = xh;
            out.at(r, c) = gamma.value()[c] * xh + beta.value()[c];
        }
    }
    return make_op(std::move(out), {x, gamma, beta}, [xhat, inv_std, N, D](Node& self) {
        Node* px = self.inputs[0].n.get();
        Node* pg = self.inputs[1].n.get();
        Node* pb = self.inputs[2].n.get();
        for (int r = 0; r < N; ++r) {
            double mean_h = 0.0, mean_hx = 0.0;
            for (int c = 0; c < D; ++c) {
                double h = self.grad.at(r, c) * pg->value[c];
                mean_h += h;
                mean_hx += h * xhat->at(r, c);
            }
            mean_h /= D;
            mean_hx /= D;
            if (px->requires_grad) {
                Tensor& gx = px->ensure_grad();
                for (int c = 0; c < D; ++c) {
                    double h = self.grad.at(r, c) * pg->value[c];
                    gx.at(r, c) += (*inv_std)[r] * (h - mean_h - xhat->at(r, c) * mean_hx);
                }
            }
            if (pg->requires_grad) {
                Tensor& gg = pg->ensure_grad();
                for (int c = 0; c < D; ++c) gg[c] += self.grad.at(r, c) * xhat->at(r, c);
            }
            if (pb->requires_grad) {
                Tensor& gb = pb->ensure_grad();
                for (int c = 0; c < D; ++c) gb[c] += self.grad.at(r, c);
            }
        }
    });
}

// ============================================================================
// Convolution (single image, [C,H,W])
// ============================================================================

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

inline Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad) {
    int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    int Ho = conv_out_dim(H, kh, stride, pad), Wo = conv_out_dim(W, kw, stride, pad);
    Tensor col({Ho * Wo, C * kh * kw});
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            int p = oy * Wo + ox;
            double* row = &col.data[static_cast<size_t>(p) * C * kh * kw];
            for (int c = 0; c < C; ++c)
                for (int r = 0; r < kh; ++r) {
                    int iy = oy * stride - pad + r;
                    for (int s = 0; s < kw; ++s) {
                        int ix = ox * stride - pad + s;
                        row[(c * kh + r) * kw + s] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x.at3(c, iy, ix) : 0.0;
                    }
                }
        }
    }
    return col;
}

/// 2-D convolution. x: [Ci,H,W], w: [Co,Ci,kh,kw], b: [Co]. Zero padding.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.rank() != 3 || wv.rank() != 4 || xv.shape[0] != wv.shape[1])
        throw ConfigError("conv2d: incompatible shapes");
    int Ci = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    int Co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
    int Ho = conv_out_dim(H, kh, stride, pad), Wo = conv_out_dim(W, kw, stride, pad);
    if (Ho < 1 || Wo < 1) throw ConfigError("conv2d: input too small");

    auto col = std::make_shared<Tensor>(im2col(xv, kh, kw, stride, pad));  // [HoWo, Cikk]
    int P = Ho * Wo, Kk = Ci * kh * kw;
    Tensor out({Co, Ho, Wo});
    // out viewed [Co, P] = w2d [Co, Kk] * col^T
    map2d(out, Co, P).noalias() = cmap2d(wv, Co, Kk) * cmap2d(*col, P, Kk).transpose();
    for (int co = 0; co < Co; ++co) {
        double bias = b.value()[co];
        for (int p = 0; p < P; ++p) out.data[static_cast<size_t>(co) * P + p] += bias;
    }
    return make_op(std::move(out), {x, w, b},
                   [col, Ci, H, W, Co, kh, kw, stride, pad, P, Kk, Ho, Wo](Node& self) {
                       Node* px = self.inputs[0].n.get();
                       Node* pw = self.inputs[1].n.get();
                       Node* pb = self.inputs[2].n.get();
                       CMapM g = cmap2d(self.grad, Co, P);
                       if (pb->requires_grad) {
                           Tensor& gb = pb->ensure_grad();
                           for (int co = 0; co < Co; ++co) gb[co] += g.row(co).sum();
                       }
                       if (pw->requires_grad)
                           map2d(pw->ensure_grad(), Co, Kk).noalias() += g * cmap2d(*col, P, Kk);
                       if (px->requires_grad) {
                           RowMat dcol = g.transpose() * cmap2d(pw->value, Co, Kk);  // [P, Kk]
                           Tensor& gx = px->ensure_grad();
                           for (int oy = 0; oy < Ho; ++oy)
                               for (int ox = 0; ox < Wo; ++ox) {
                                   int p = oy * Wo + ox;
                                   for (int c = 0; c < Ci; ++c)
                                       for (int r = 0; r < kh; ++r) {
                                           int iy = oy * stride - pad + r;
                                           if (iy < 0 || iy >= H) continue;
                                           for (int s = 0; s < kw; ++s) {
                                               int ix = ox * stride - pad + s;
                                               if (ix < 0 || ix >= W) continue;
                                               gx.at3(c, iy, ix) += dcol(p, (c * kh + r) * kw + s);
                                           }
                                       }
                               }
                       }
                   });
}

}  // namespace acdet
