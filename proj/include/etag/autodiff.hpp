#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every primitive executed during a forward pass. Each node
// owns its output value and, during backward, a gradient buffer of the same
// size. Nodes are appended in execution order, so the node vector is already
// a topological order and backward is a single reverse sweep.
//
// Trainable parameters enter a tape through `leaf`/`bind`; after `backward`
// their accumulated gradient is added into `Tensor::grad`. Constants (data,
// frozen snapshots, generated features) never receive gradient.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "etag/errors.hpp"
#include "etag/tensor.hpp"

namespace etag {

/// Floor applied to probabilities inside log and KL.
inline constexpr double kProbabilityFloor = 1e-12;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    std::size_t size() const { return value().size(); }
    double item() const { return value().item(); }
    Tape* tape() const { return tape_; }
    std::size_t index() const { return index_; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

    Tape* tape_ = nullptr;
    std::size_t index_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value) {
        value.grad.clear();
        value.requires_grad = false;
        nodes_.push_back(Node{std::move(value), {}, {}, nullptr, nullptr, false});
        return Var(this, nodes_.size() - 1);
    }

    /// Leaf bound to a parameter. If the parameter requires grad, backward
    /// accumulates into `param.grad`.
    Var leaf(Tensor& param) {
        Tensor copy(param.shape, param.values);
        const bool needs = param.requires_grad;
        nodes_.push_back(Node{std::move(copy), {}, {}, nullptr, needs ? &param : nullptr, needs});
        return Var(this, nodes_.size() - 1);
    }

    Var bind(Tensor& param) { return param.requires_grad ? leaf(param) : constant(param); }
    Var bind(const Tensor& param) { return constant(param); }

    /// Append an op node. `fn` may be empty when no input needs gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        Node node;
        node.value = std::move(value);
        for (const Var& v : inputs) {
            if (v.tape_ != this) throw UsageError("Var from a different tape");
            node.inputs.push_back(v.index_);
            node.needs_grad = node.needs_grad || nodes_[v.index_].needs_grad;
        }
        if (node.needs_grad) node.backward = std::move(fn);
        nodes_.push_back(std::move(node));
        return Var(this, nodes_.size() - 1);
    }

    const Tensor& value(std::size_t i) const { return nodes_[i].value; }
    bool needs_grad(std::size_t i) const { return nodes_[i].needs_grad; }
    bool needs_grad(const Var& v) const { return nodes_[v.index_].needs_grad; }
    std::size_t input(std::size_t node, std::size_t k) const { return nodes_[node].inputs[k]; }
    std::size_t size() const { return nodes_.size(); }

    /// Gradient buffer of node i, zero-allocated on first access.
    std::vector<double>& grad(std::size_t i) {
        Node& n = nodes_[i];
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }
    std::vector<double>& grad(const Var& v) { return grad(v.index_); }

    /// Seed d(output)/d(output) = 1 and sweep the tape in reverse.
    /// Returns the number of op nodes whose backward ran.
    std::size_t backward(const Var& output) {
        if (output.tape_ != this) throw UsageError("backward: output from a different tape");
        if (nodes_[output.index_].value.size() != 1) {
            throw ShapeError("backward: output must be scalar, got shape " +
                             to_string(nodes_[output.index_].value.shape));
        }
        for (Node& n : nodes_) n.grad.clear();
        grad(output.index_)[0] = 1.0;
        std::size_t visited = 0;
        for (std::size_t i = output.index_ + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty()) continue;
            if (n.backward) {
                n.backward(*this, i);
                ++visited;
            } else if (n.param != nullptr) {
                Tensor& p = *n.param;
                if (p.grad.size() != p.values.size()) p.grad.assign(p.values.size(), 0.0);
                for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += n.grad[k];
            }
        }
        return visited;
    }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Tensor* param = nullptr;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(index_); }

inline std::size_t backward(Tape& tape, const Var& output) { return tape.backward(output); }

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
    }
}

inline void require_rank(const Var& a, std::size_t rank, const char* op) {
    if (a.shape().size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(a.shape()));
    }
}

// Accumulate g (scaled) into input k of node `self` if that input wants gradient.
template <class F>
void accumulate(Tape& tape, std::size_t self, std::size_t k, F&& per_element) {
    const std::size_t in = tape.input(self, k);
    if (!tape.needs_grad(in)) return;
    per_element(tape.grad(in));
}

// Rows/cols view of a rank-1 or rank-2 tensor for row-wise ops.
inline std::pair<std::size_t, std::size_t> rows_cols(const Shape& s, const char* op) {
    if (s.size() == 1) return {1, s[0]};
    if (s.size() == 2) return {s[0], s[1]};
    throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + to_string(s));
}

inline Shape row_reduced_shape(const Shape& s) {
    if (s.size() == 1) return Shape{};
    return Shape{s[0]};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.tape()->record(std::move(out), {a, b}, [](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        for (std::size_t k = 0; k < 2; ++k)
            detail::accumulate(t, self, k, [&](std::vector<double>& gi) {
                for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
            });
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return a.tape()->record(std::move(out), {a, b}, [](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        });
        detail::accumulate(t, self, 1, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] -= g[i];
        });
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.tape()->record(std::move(out), {a, b}, [](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& av = t.value(t.input(self, 0));
        const Tensor& bv = t.value(t.input(self, 1));
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * bv[i];
        });
        detail::accumulate(t, self, 1, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * av[i];
        });
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.values) v *= s;
    return a.tape()->record(std::move(out), {a}, [s](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += s * g[i];
        });
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.values) v += s;
    return a.tape()->record(std::move(out), {a}, [](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        });
    });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

inline Var relu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.values) v = v > 0.0 ? v : 0.0;
    return a.tape()->record(std::move(out), {a}, [](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& y = t.value(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if (y[i] > 0.0) gi[i] += g[i];
        });
    });
}

/// Natural log with the input clamped below at kProbabilityFloor.
inline Var log(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.values) v = std::log(std::max(v, kProbabilityFloor));
    return a.tape()->record(std::move(out), {a}, [](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& x = t.value(t.input(self, 0));
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x[i] > kProbabilityFloor) gi[i] += g[i] / x[i];
        });
    });
}

inline Var exp(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.values) v = std::exp(v);
    return a.tape()->record(std::move(out), {a}, [](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& y = t.value(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * y[i];
        });
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values) s += v;
    return a.tape()->record(Tensor::scalar(s), {a}, [](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (double& v : gi) v += g;
        });
    });
}

/// Mean over every element. An empty input is a domain error.
inline Var mean(const Var& a) {
    const std::size_t n = a.size();
    if (n == 0) throw DomainError("mean of empty tensor");
    double s = 0.0;
    for (double v : a.value().values) s += v;
    return a.tape()->record(Tensor::scalar(s / static_cast<double>(n)), {a}, [n](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0] / static_cast<double>(n);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (double& v : gi) v += g;
        });
    });
}

/// Per-row squared L2 norm. Rank-2 input gives one value per row; rank-1 gives a scalar.
inline Var sq_norm_rows(const Var& a) {
    auto [rows, cols] = detail::rows_cols(a.shape(), "sq_norm_rows");
    Tensor out(detail::row_reduced_shape(a.shape()));
    const Tensor& x = a.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c] * x[r * cols + c];
        out[r] = s;
    }
    return a.tape()->record(std::move(out), {a}, [rows, cols](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& x = t.value(t.input(self, 0));
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gi[r * cols + c] += 2.0 * g[r] * x[r * cols + c];
        });
    });
}

/// Per-row L2 norm. The subgradient at a zero row is taken as zero.
inline Var norm_rows(const Var& a) {
    auto [rows, cols] = detail::rows_cols(a.shape(), "norm_rows");
    Tensor out(detail::row_reduced_shape(a.shape()));
    const Tensor& x = a.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c] * x[r * cols + c];
        out[r] = std::sqrt(s);
    }
    return a.tape()->record(std::move(out), {a}, [rows, cols](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& x = t.value(t.input(self, 0));
        const Tensor& y = t.value(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < rows; ++r) {
                if (y[r] == 0.0) continue;
                for (std::size_t c = 0; c < cols; ++c) gi[r * cols + c] += g[r] * x[r * cols + c] / y[r];
            }
        });
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, Shape shape) {
    if (element_count(shape) != a.size()) {
        throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
    }
    Tensor out(std::move(shape), a.value().values);
    return a.tape()->record(std::move(out), {a}, [](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        });
    });
}

/// [N x A] ++ [N x B] -> [N x (A+B)]
inline Var concat_cols(const Var& a, const Var& b) {
    detail::require_rank(a, 2, "concat_cols");
    detail::require_rank(b, 2, "concat_cols");
    const std::size_t n = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
    if (b.shape()[0] != n) throw ShapeError("concat_cols: row counts differ");
    Tensor out(Shape{n, ca + cb});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(av.values.begin() + static_cast<std::ptrdiff_t>(r * ca), ca,
                    out.values.begin() + static_cast<std::ptrdiff_t>(r * (ca + cb)));
        std::copy_n(bv.values.begin() + static_cast<std::ptrdiff_t>(r * cb), cb,
                    out.values.begin() + static_cast<std::ptrdiff_t>(r * (ca + cb) + ca));
    }
    return a.tape()->record(std::move(out), {a, b}, [n, ca, cb](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < ca; ++c) gi[r * ca + c] += g[r * (ca + cb) + c];
        });
        detail::accumulate(t, self, 1, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < cb; ++c) gi[r * cb + c] += g[r * (ca + cb) + ca + c];
        });
    });
}

/// Columns [begin, end) of an N x K matrix.
inline Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
    detail::require_rank(a, 2, "slice_cols");
    const std::size_t n = a.shape()[0], k = a.shape()[1];
    if (begin > end || end > k) {
        throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside width " + std::to_string(k));
    }
    const std::size_t w = end - begin;
    Tensor out(Shape{n, w});
    const Tensor& x = a.value();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x[r * k + begin + c];
    return a.tape()->record(std::move(out), {a}, [n, k, w, begin](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < w; ++c) gi[r * k + begin + c] += g[r * w + c];
        });
    });
}

/// Rows [begin, end) of the leading dimension.
inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
    Tensor out = take_rows(a.value(), begin, end);
    const std::size_t stride = a.shape()[0] ? a.size() / a.shape()[0] : 0;
    return a.tape()->record(std::move(out), {a}, [begin, stride](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i) gi[begin * stride + i] += g[i];
        });
    });
}

inline Var transpose(const Var& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    Tensor out(Shape{c, r});
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return a.tape()->record(std::move(out), {a}, [r, c](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gi[i * c + j] += g[j * r + i];
        });
    });
}

/// Quarter-turn rotation of an N x H x W x C batch (see the Tensor overload).
inline Var rotate90(const Var& a, int k) {
    Tensor out = rotate90(a.value(), k);
    return a.tape()->record(std::move(out), {a}, [k](Tape& t, std::size_t self) {
        // The adjoint of a rotation by k is the rotation by 4-k.
        const Tensor& y = t.value(self);
        Tensor g(y.shape, t.grad(self));
        Tensor back = rotate90(g, (4 - k) % 4);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += back[i];
        });
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {

// C[n x m] += A[n x k] * B[k x m]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        double* ci = c + i * m;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * m;
            for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[n x k] += G[n x m] * B[k x m]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g + i * m;
        double* ci = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * m;
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += gi[j] * bp[j];
            ci[p] += s;
        }
    }
}

// C[k x m] += A[n x k]^T * G[n x m]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* ai = a + i * k;
        const double* gi = g + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + p * m;
            for (std::size_t j = 0; j < m; ++j) cp[j] += av * gi[j];
        }
    }
}

}  // namespace detail

/// [N x K] * [K x M] -> [N x M]
inline Var matmul(const Var& a, const Var& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ShapeError("matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    Tensor out(Shape{n, m});
    detail::gemm_nn(a.value().values.data(), b.value().values.data(), out.values.data(), n, k, m);
    return a.tape()->record(std::move(out), {a, b}, [n, k, m](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& av = t.value(t.input(self, 0));
        const Tensor& bv = t.value(t.input(self, 1));
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            detail::gemm_nt(g.data(), bv.values.data(), gi.data(), n, k, m);
        });
        detail::accumulate(t, self, 1, [&](std::vector<double>& gi) {
            detail::gemm_tn(av.values.data(), g.data(), gi.data(), n, k, m);
        });
    });
}

/// Row-wise bias: [N x M] + [M]. The one explicit broadcast the engine offers.
inline Var add_bias(const Var& x, const Var& bias) {
    detail::require_rank(x, 2, "add_bias");
    detail::require_rank(bias, 1, "add_bias");
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    if (bias.shape()[0] != m) throw ShapeError("add_bias: bias width differs from columns");
    Tensor out = x.value();
    const Tensor& b = bias.value();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out[r * m + c] += b[c];
    return x.tape()->record(std::move(out), {x, bias}, [n, m](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        });
        detail::accumulate(t, self, 1, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) gi[c] += g[r * m + c];
        });
    });
}

/// 3x3 convolution, zero padding 1, stride 1 or 2, with bias.
///
/// x: N x H x W x Cin, weight: 3 x 3 x Cin x Cout, bias: Cout.
/// Output: N x H' x W' x Cout with H' = (H - 1) / stride + 1.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(weight, 4, "conv2d");
    detail::require_rank(bias, 1, "conv2d");
    if (stride != 1 && stride != 2) throw DomainError("conv2d: stride must be 1 or 2");
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    const std::size_t n = xs[0], h = xs[1], w = xs[2], cin = xs[3];
    if (ws[0] != 3 || ws[1] != 3 || ws[2] != cin) {
        throw ShapeError("conv2d: weight " + to_string(ws) + " incompatible with input " + to_string(xs));
    }
    const std::size_t cout = ws[3];
    if (bias.shape()[0] != cout) throw ShapeError("conv2d: bias width differs from output channels");
    const std::size_t oh = (h - 1) / stride + 1, ow = (w - 1) / stride + 1;

    Tensor out(Shape{n, oh, ow, cout});
    const double* xv = x.value().values.data();
    const double* wv = weight.value().values.data();
    const double* bv = bias.value().values.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t r = 0; r < oh; ++r)
            for (std::size_t c = 0; c < ow; ++c) {
                double* o = out.values.data() + ((b * oh + r) * ow + c) * cout;
                for (std::size_t co = 0; co < cout; ++co) o[co] = bv[co];
                for (std::size_t kr = 0; kr < 3; ++kr) {
                    const std::ptrdiff_t ir = static_cast<std::ptrdiff_t>(r * stride + kr) - 1;
                    if (ir < 0 || ir >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kc = 0; kc < 3; ++kc) {
                        const std::ptrdiff_t ic = static_cast<std::ptrdiff_t>(c * stride + kc) - 1;
                        if (ic < 0 || ic >= static_cast<std::ptrdiff_t>(w)) continue;
                        const double* in = xv + ((b * h + static_cast<std::size_t>(ir)) * w + static_cast<std::size_t>(ic)) * cin;
                        const double* wk = wv + (kr * 3 + kc) * cin * cout;
                        detail::gemm_nn(in, wk, o, 1, cin, cout);
                    }
                }
            }

    return x.tape()->record(std::move(out), {x, weight, bias},
                            [n, h, w, cin, cout, oh, ow, stride](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const double* xv = t.value(t.input(self, 0)).values.data();
        const double* wv = t.value(t.input(self, 1)).values.data();
        const bool gx = t.needs_grad(t.input(self, 0));
        const bool gw = t.needs_grad(t.input(self, 1));
        const bool gb = t.needs_grad(t.input(self, 2));
        double* dx = gx ? t.grad(t.input(self, 0)).data() : nullptr;
        double* dw = gw ? t.grad(t.input(self, 1)).data() : nullptr;
        double* db = gb ? t.grad(t.input(self, 2)).data() : nullptr;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t r = 0; r < oh; ++r)
                for (std::size_t c = 0; c < ow; ++c) {
                    const double* go = g.data() + ((b * oh + r) * ow + c) * cout;
                    if (db)
                        for (std::size_t co = 0; co < cout; ++co) db[co] += go[co];
                    for (std::size_t kr = 0; kr < 3; ++kr) {
                        const std::ptrdiff_t ir = static_cast<std::ptrdiff_t>(r * stride + kr) - 1;
                        if (ir < 0 || ir >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kc = 0; kc < 3; ++kc) {
                            const std::ptrdiff_t ic = static_cast<std::ptrdiff_t>(c * stride + kc) - 1;
                            if (ic < 0 || ic >= static_cast<std::ptrdiff_t>(w)) continue;
                            const std::size_t in_off =
                                ((b * h + static_cast<std::size_t>(ir)) * w + static_cast<std::size_t>(ic)) * cin;
                            const std::size_t w_off = (kr * 3 + kc) * cin * cout;
                            if (dx) detail::gemm_nt(go, wv + w_off, dx + in_off, 1, cin, cout);
                            if (dw) detail::gemm_tn(xv + in_off, go, dw + w_off, 1, cin, cout);
                        }
                    }
                }
    });
}

/// N x H x W x C -> N x C by averaging over spatial positions.
inline Var global_avg_pool(const Var& x) {
    detail::require_rank(x, 4, "global_avg_pool");
    const std::size_t n = x.shape()[0], hw = x.shape()[1] * x.shape()[2], c = x.shape()[3];
    Tensor out(Shape{n, c});
    const Tensor& xv = x.value();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] += xv[(b * hw + p) * c + ch];
    for (double& v : out.values) v /= static_cast<double>(hw);
    return x.tape()->record(std::move(out), {x}, [n, hw, c](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            const double inv = 1.0 / static_cast<double>(hw);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t p = 0; p < hw; ++p)
                    for (std::size_t ch = 0; ch < c; ++ch) gi[(b * hw + p) * c + ch] += g[b * c + ch] * inv;
        });
    });
}

// ---------------------------------------------------------------------------
// Probability
// ---------------------------------------------------------------------------

namespace detail {

inline void check_tau(double tau) {
    if (!(tau > 0.0)) throw DomainError("temperature must be positive, got " + std::to_string(tau));
}

// Row-wise softmax of x / tau, max-subtracted.
inline void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols, double tau) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double* yr = y + r * cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, xr[c] / tau);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] / tau - mx);
            s += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= s;
    }
}

}  // namespace detail

/// Row-wise softmax(logits / tau). Rank 1 or 2.
inline Var softmax(const Var& logits, double tau = 1.0) {
    detail::check_tau(tau);
    auto [rows, cols] = detail::rows_cols(logits.shape(), "softmax");
    Tensor out(logits.shape());
    detail::softmax_rows(logits.value().values.data(), out.values.data(), rows, cols, tau);
    return logits.tape()->record(std::move(out), {logits}, [rows, cols, tau](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& y = t.value(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                for (std::size_t c = 0; c < cols; ++c)
                    gi[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot) / tau;
            }
        });
    });
}

/// Row-wise log softmax(logits / tau).
inline Var log_softmax(const Var& logits, double tau = 1.0) {
    detail::check_tau(tau);
    auto [rows, cols] = detail::rows_cols(logits.shape(), "log_softmax");
    Tensor out(logits.shape());
    const Tensor& x = logits.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, x[r * cols + c] / tau);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += std::exp(x[r * cols + c] / tau - mx);
        const double lse = mx + std::log(s);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] / tau - lse;
    }
    return logits.tape()->record(std::move(out), {logits}, [rows, cols, tau](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& y = t.value(self);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < rows; ++r) {
                double gs = 0.0;
                for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
                for (std::size_t c = 0; c < cols; ++c)
                    gi[r * cols + c] += (g[r * cols + c] - std::exp(y[r * cols + c]) * gs) / tau;
            }
        });
    });
}

/// Row-wise KL(p || q) = sum_i p_i ln(p_i / q_i), with 0 ln 0 := 0 and q
/// clamped below at kProbabilityFloor. Rank-1 inputs give a scalar, rank-2
/// inputs give one value per row.
inline Var kl_divergence(const Var& p, const Var& q) {
    if (p.shape() != q.shape()) {
        throw ShapeError("kl_divergence: shapes " + to_string(p.shape()) + " and " + to_string(q.shape()) +
                         " differ");
    }
    auto [rows, cols] = detail::rows_cols(p.shape(), "kl_divergence");
    Tensor out(detail::row_reduced_shape(p.shape()));
    const Tensor& pv = p.value();
    const Tensor& qv = q.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double pi = pv[r * cols + c];
            if (pi <= 0.0) continue;
            s += pi * std::log(pi / std::max(qv[r * cols + c], kProbabilityFloor));
        }
        out[r] = s;
    }
    return p.tape()->record(std::move(out), {p, q}, [rows, cols](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& pv = t.value(t.input(self, 0));
        const Tensor& qv = t.value(t.input(self, 1));
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    const double pi = std::max(pv[i], kProbabilityFloor);
                    gi[i] += g[r] * (std::log(pi / std::max(qv[i], kProbabilityFloor)) + 1.0);
                }
        });
        detail::accumulate(t, self, 1, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    if (qv[i] > kProbabilityFloor) gi[i] -= g[r] * pv[i] / qv[i];
                }
        });
    });
}

/// Mean over rows of -ln softmax(logits)[label]. Fused for stability.
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
    detail::require_rank(logits, 2, "cross_entropy");
    const std::size_t n = logits.shape()[0], k = logits.shape()[1];
    if (n == 0) throw DomainError("cross_entropy: empty batch");
    if (labels.size() != n) throw ShapeError("cross_entropy: label count differs from batch size");
    Tensor probs(Shape{n, k});
    detail::softmax_rows(logits.value().values.data(), probs.values.data(), n, k, 1.0);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] >= k) {
            throw DomainError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " +
                              std::to_string(k) + ")");
        }
        // log-sum-exp form avoids log of an underflowed probability
        const double* x = logits.value().values.data() + r * k;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, x[c]);
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += std::exp(x[c] - mx);
        loss += mx + std::log(s) - x[labels[r]];
    }
    loss /= static_cast<double>(n);
    return logits.tape()->record(Tensor::scalar(loss), {logits},
                                 [n, k, labels, probs = std::move(probs)](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0] / static_cast<double>(n);
        detail::accumulate(t, self, 0, [&](std::vector<double>& gi) {
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < k; ++c) gi[r * k + c] += g * probs[r * k + c];
                gi[r * k + labels[r]] -= g;
            }
        });
    });
}

/// Reparameterized Gaussian sample mu + exp(logvar / 2) * eps with caller-supplied noise.
inline Var gaussian_sample(const Var& mu, const Var& logvar, const Tensor& eps) {
    detail::require_same_shape(mu, logvar, "gaussian_sample");
    if (eps.shape != mu.shape()) throw ShapeError("gaussian_sample: noise shape differs from mean");
    Var e = mu.tape()->constant(eps);
    return add(mu, mul(exp(scale(logvar, 0.5)), e));
}

}  // namespace etag
