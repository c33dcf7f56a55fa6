#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "davqa/errors.hpp"
#include "davqa/rng.hpp"
#include "davqa/sha256.hpp"

namespace davqa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

using EigenMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMatrix>;
using ConstMatMap = Eigen::Map<const EigenMatrix>;

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording in a scope. Forward values are unaffected.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major double tensor with reverse-mode autodiff. Copying a Tensor
// shares the underlying node (graph identity); values written by an op are
// never mutated afterwards, only leaves are updated in place by optimizers.
class Tensor {
    struct Node {
        Shape shape;
        std::vector<double> values;
        std::vector<double> grad;  // empty until first accumulation
        bool requires_grad = false;
        std::vector<Tensor> parents;
        std::function<void(const std::vector<double>&)> backward_fn;
    };

public:
    Tensor() : node_(std::make_shared<Node>()) {}

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.node_->values.assign(shape_numel(shape), 0.0);
        t.node_->shape = std::move(shape);
        return t;
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->values.begin(), t.node_->values.end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
        Tensor t = zeros(std::move(shape));
        for (double& v : t.node_->values) v = rng.normal(mean, stddev);
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->values.size(); }
    std::size_t rows() const { return node_->shape.empty() ? 0 : node_->shape[0]; }
    std::size_t cols() const { return node_->shape.size() < 2 ? 1 : node_->shape[1]; }

    const std::vector<double>& data() const { return node_->values; }
    std::vector<double>& data() { return node_->values; }

    double item() const {
        if (numel() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
        return node_->values[0];
    }

    double operator()(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }

    const std::vector<double>& grad() const {
        if (node_->grad.empty()) throw ContractError("tensor has no gradient; call backward() first");
        return node_->grad;
    }

    void zero_grad() { node_->grad.clear(); }

    // Reverse-mode backprop from a scalar loss through the recorded graph.
    void backward() const {
        if (numel() != 1) {
            throw ContractError("backward() requires a scalar loss tensor, got " + shape_str(shape()));
        }
        // Topological order over graph parents (iterative post-order DFS).
        std::vector<Node*> topo;
        std::unordered_set<Node*> visited;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx].node_.get();
                ++idx;
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                topo.push_back(n);
                stack.pop_back();
            }
        }
        node_->grad.assign(1, 1.0);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            Node* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn(n->grad);
        }
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<Node> node_;

    void accumulate_grad(const double* g, std::size_t len) {
        if (node_->grad.empty()) node_->grad.assign(numel(), 0.0);
        for (std::size_t i = 0; i < len; ++i) node_->grad[i] += g[i];
    }

    friend struct OpBuilder;
    friend inline double* grad_buffer(Tensor& t);
};

inline double* grad_buffer(Tensor& t) {
    if (t.node_->grad.empty()) t.node_->grad.assign(t.numel(), 0.0);
    return t.node_->grad.data();
}

// Builds an op result node, wiring parents and the backward closure only when
// grad recording is active and some parent requires grad.
struct OpBuilder {
    static Tensor make(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                       std::function<void(const std::vector<double>&)> backward_fn) {
        Tensor out = Tensor::from(std::move(shape), std::move(values));
        bool needs = false;
        if (grad_enabled()) {
            for (const Tensor& p : parents) needs = needs || p.requires_grad();
        }
        if (needs) {
            out.node_->requires_grad = true;
            out.node_->parents = std::move(parents);
            out.node_->backward_fn = std::move(backward_fn);
        }
        return out;
    }

    static void accumulate(Tensor& t, const std::vector<double>& g) {
        if (t.requires_grad()) t.accumulate_grad(g.data(), g.size());
    }

    static void accumulate(Tensor& t, const double* g, std::size_t len) {
        if (t.requires_grad()) t.accumulate_grad(g, len);
    }
};

namespace detail {

inline void require_2d(const Tensor& t, const char* op) {
    if (t.shape().size() != 2) {
        throw ShapeError(std::string(op) + " requires a 2-d tensor, got " + shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace detail

// ---- arithmetic ----

inline Tensor add(Tensor a, Tensor b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return OpBuilder::make(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<double>& g) mutable {
        OpBuilder::accumulate(a, g);
        OpBuilder::accumulate(b, g);
    });
}

inline Tensor sub(Tensor a, Tensor b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return OpBuilder::make(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<double>& g) mutable {
        OpBuilder::accumulate(a, g);
        if (b.requires_grad()) {
            double* gb = grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

inline Tensor mul(Tensor a, Tensor b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return OpBuilder::make(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<double>& g) mutable {
        if (a.requires_grad()) {
            double* ga = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
        }
        if (b.requires_grad()) {
            double* gb = grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
        }
    });
}

inline Tensor scale(Tensor a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return OpBuilder::make(a.shape(), std::move(out), {a}, [a, c](const std::vector<double>& g) mutable {
        if (a.requires_grad()) {
            double* ga = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        }
    });
}

// Multiplies every element by a single learnable scalar (a one-element
// tensor). Used as a residual-branch gate: initialized at zero it makes a
// transformer block start as the identity map, which keeps deep stacks
// trainable at small scale without warmup schedules.
inline Tensor scale_by(Tensor a, Tensor gate) {
    if (gate.numel() != 1) {
        throw ShapeError("scale_by expects a one-element gate, got " + shape_str(gate.shape()));
    }
    const double c = gate.data()[0];
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return OpBuilder::make(a.shape(), std::move(out), {a, gate},
                           [a, gate, c](const std::vector<double>& g) mutable {
                               if (a.requires_grad()) {
                                   double* ga = grad_buffer(a);
                                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                               }
                               if (gate.requires_grad()) {
                                   double* gg = grad_buffer(gate);
                                   double acc = 0.0;
                                   for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.data()[i];
                                   gg[0] += acc;
                               }
                           });
}

// Adds a length-n bias vector to every row of an [m x n] tensor.
inline Tensor add_bias(Tensor x, Tensor bias) {
    detail::require_2d(x, "add_bias");
    if (bias.numel() != x.cols()) {
        throw ShapeError("add_bias: bias length " + shape_str(bias.shape()) + " does not match row width " +
                         shape_str(x.shape()));
    }
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x.data()[r * n + c] + bias.data()[c];
    return OpBuilder::make(x.shape(), std::move(out), {x, bias},
                           [x, bias, m, n](const std::vector<double>& g) mutable {
                               OpBuilder::accumulate(x, g);
                               if (bias.requires_grad()) {
                                   double* gb = grad_buffer(bias);
                                   for (std::size_t r = 0; r < m; ++r)
                                       for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
                               }
                           });
}

// ---- matrix ops ----

inline Tensor matmul(Tensor a, Tensor b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n);
    {
        detail::ConstMatMap A(a.data().data(), m, k), B(b.data().data(), k, n);
        detail::MatMap C(out.data(), m, n);
        C.noalias() = A * B;
    }
    return OpBuilder::make({m, n}, std::move(out), {a, b},
                           [a, b, m, k, n](const std::vector<double>& g) mutable {
                               detail::ConstMatMap G(g.data(), m, n);
                               if (a.requires_grad()) {
                                   detail::ConstMatMap B(b.data().data(), k, n);
                                   detail::MatMap GA(grad_buffer(a), m, k);
                                   GA.noalias() += G * B.transpose();
                               }
                               if (b.requires_grad()) {
                                   detail::ConstMatMap A(a.data().data(), m, k);
                                   detail::MatMap GB(grad_buffer(b), k, n);
                                   GB.noalias() += A.transpose() * G;
                               }
                           });
}

// y = x . W^T (+ bias), with W stored [out x in] so spec-shaped weight
// matrices apply without an explicit transpose.
inline Tensor linear(Tensor x, Tensor w) {
    detail::require_2d(x, "linear");
    detail::require_2d(w, "linear");
    if (x.cols() != w.cols()) {
        throw ShapeError("linear dimension mismatch: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    }
    const std::size_t m = x.rows(), k = x.cols(), n = w.rows();
    std::vector<double> out(m * n);
    {
        detail::ConstMatMap X(x.data().data(), m, k), W(w.data().data(), n, k);
        detail::MatMap Y(out.data(), m, n);
        Y.noalias() = X * W.transpose();
    }
    return OpBuilder::make({m, n}, std::move(out), {x, w},
                           [x, w, m, k, n](const std::vector<double>& g) mutable {
                               detail::ConstMatMap G(g.data(), m, n);
                               if (x.requires_grad()) {
                                   detail::ConstMatMap W(w.data().data(), n, k);
                                   detail::MatMap GX(grad_buffer(x), m, k);
                                   GX.noalias() += G * W;
                               }
                               if (w.requires_grad()) {
                                   detail::ConstMatMap X(x.data().data(), m, k);
                                   detail::MatMap GW(grad_buffer(w), n, k);
                                   GW.noalias() += G.transpose() * X;
                               }
                           });
}

inline Tensor linear(Tensor x, Tensor w, Tensor bias) {
    return add_bias(linear(x, w), bias);
}

inline Tensor transpose(Tensor a) {
    detail::require_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[c * m + r] = a.data()[r * n + c];
    return OpBuilder::make({n, m}, std::move(out), {a}, [a, m, n](const std::vector<double>& g) mutable {
        if (a.requires_grad()) {
            double* ga = grad_buffer(a);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[c * m + r];
        }
    });
}

// ---- activations ----

// Exact erf-based GELU.
inline Tensor gelu(Tensor x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    return OpBuilder::make(x.shape(), std::move(out), {x}, [x](const std::vector<double>& g) mutable {
        if (!x.requires_grad()) return;
        double* gx = grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = x.data()[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

inline Tensor relu(Tensor x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    return OpBuilder::make(x.shape(), std::move(out), {x}, [x](const std::vector<double>& g) mutable {
        if (!x.requires_grad()) return;
        double* gx = grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += x.data()[i] > 0.0 ? g[i] : 0.0;
    });
}

inline Tensor tanh_act(Tensor x) {
    auto out = std::make_shared<std::vector<double>>(x.numel());
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = std::tanh(x.data()[i]);
    return OpBuilder::make(x.shape(), std::vector<double>(*out), {x},
                           [x, out](const std::vector<double>& g) mutable {
                               if (!x.requires_grad()) return;
                               double* gx = grad_buffer(x);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   const double y = (*out)[i];
                                   gx[i] += g[i] * (1.0 - y * y);
                               }
                           });
}

// ---- normalization / softmax ----

inline Tensor layer_norm(Tensor x, Tensor gamma, Tensor beta, double eps = 1e-5) {
    detail::require_2d(x, "layer_norm");
    const std::size_t m = x.rows(), n = x.cols();
    if (gamma.numel() != n || beta.numel() != n) {
        throw ShapeError("layer_norm parameter width mismatch for input " + shape_str(x.shape()));
    }
    std::vector<double> out(m * n);
    auto xhat = std::make_shared<std::vector<double>>(m * n);
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = x.data().data() + r * n;
        double mean = 0.0;
        for (std::size_t c = 0; c < n; ++c) mean += row[c];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < n; ++c) {
            const double xh = (row[c] - mean) * is;
            (*xhat)[r * n + c] = xh;
            out[r * n + c] = gamma.data()[c] * xh + beta.data()[c];
        }
    }
    return OpBuilder::make(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat, inv_std, m, n](const std::vector<double>& g) mutable {
            if (gamma.requires_grad()) {
                double* gg = grad_buffer(gamma);
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * (*xhat)[r * n + c];
            }
            if (beta.requires_grad()) {
                double* gb = grad_buffer(beta);
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
            }
            if (x.requires_grad()) {
                double* gx = grad_buffer(x);
                for (std::size_t r = 0; r < m; ++r) {
                    double mean_dy = 0.0, mean_dy_xhat = 0.0;
                    for (std::size_t c = 0; c < n; ++c) {
                        const double dy = g[r * n + c] * gamma.data()[c];
                        mean_dy += dy;
                        mean_dy_xhat += dy * (*xhat)[r * n + c];
                    }
                    mean_dy /= static_cast<double>(n);
                    mean_dy_xhat /= static_cast<double>(n);
                    for (std::size_t c = 0; c < n; ++c) {
                        const double dy = g[r * n + c] * gamma.data()[c];
                        gx[r * n + c] +=
                            (*inv_std)[r] * (dy - mean_dy - (*xhat)[r * n + c] * mean_dy_xhat);
                    }
                }
            }
        });
}

inline Tensor softmax_rows(Tensor x) {
    detail::require_2d(x, "softmax_rows");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = x.data().data() + r * n;
        double mx = row[0];
        for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            out[r * n + c] = std::exp(row[c] - mx);
            sum += out[r * n + c];
        }
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= sum;
    }
    auto probs = std::make_shared<std::vector<double>>(out);
    return OpBuilder::make(x.shape(), std::move(out), {x},
                           [x, probs, m, n](const std::vector<double>& g) mutable {
                               if (!x.requires_grad()) return;
                               double* gx = grad_buffer(x);
                               for (std::size_t r = 0; r < m; ++r) {
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < n; ++c)
                                       dot += g[r * n + c] * (*probs)[r * n + c];
                                   for (std::size_t c = 0; c < n; ++c)
                                       gx[r * n + c] += (*probs)[r * n + c] * (g[r * n + c] - dot);
                               }
                           });
}

// ---- shape manipulation ----

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows requires at least one part");
    const std::size_t n = parts[0].cols();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        detail::require_2d(p, "concat_rows");
        if (p.cols() != n) {
            throw ShapeError("concat_rows width mismatch: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        total += p.rows();
    }
    std::vector<double> out;
    out.reserve(total * n);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<Tensor> parents = parts;
    return OpBuilder::make({total, n}, std::move(out), parents,
                           [parents, n](const std::vector<double>& g) mutable {
                               std::size_t offset = 0;
                               for (Tensor& p : parents) {
                                   const std::size_t len = p.numel();
                                   OpBuilder::accumulate(p, g.data() + offset, len);
                                   offset += len;
                               }
                           });
}

inline Tensor slice_rows(Tensor x, std::size_t begin, std::size_t count) {
    detail::require_2d(x, "slice_rows");
    if (begin + count > x.rows()) {
        throw IndexError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(x.shape()));
    }
    const std::size_t n = x.cols();
    std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + (begin + count) * n);
    return OpBuilder::make({count, n}, std::move(out), {x},
                           [x, begin, n](const std::vector<double>& g) mutable {
                               if (!x.requires_grad()) return;
                               double* gx = grad_buffer(x);
                               for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
                           });
}

inline Tensor slice_cols(Tensor x, std::size_t begin, std::size_t count) {
    detail::require_2d(x, "slice_cols");
    if (begin + count > x.cols()) {
        throw IndexError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(x.shape()));
    }
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * count);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < count; ++c) out[r * count + c] = x.data()[r * n + begin + c];
    return OpBuilder::make({m, count}, std::move(out), {x},
                           [x, begin, m, n, count](const std::vector<double>& g) mutable {
                               if (!x.requires_grad()) return;
                               double* gx = grad_buffer(x);
                               for (std::size_t r = 0; r < m; ++r)
                                   for (std::size_t c = 0; c < count; ++c)
                                       gx[r * n + begin + c] += g[r * count + c];
                           });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols requires at least one part");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.rows() != m) {
            throw ShapeError("concat_cols height mismatch: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        total += p.cols();
    }
    std::vector<double> out(m * total);
    std::size_t col_off = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < pc; ++c) out[r * total + col_off + c] = p.data()[r * pc + c];
        col_off += pc;
    }
    std::vector<Tensor> parents = parts;
    return OpBuilder::make({m, total}, std::move(out), parents,
                           [parents, m, total](const std::vector<double>& g) mutable {
                               std::size_t col_off = 0;
                               for (Tensor& p : parents) {
                                   const std::size_t pc = p.cols();
                                   if (p.requires_grad()) {
                                       double* gp = grad_buffer(p);
                                       for (std::size_t r = 0; r < m; ++r)
                                           for (std::size_t c = 0; c < pc; ++c)
                                               gp[r * pc + c] += g[r * total + col_off + c];
                                   }
                                   col_off += pc;
                               }
                           });
}

// Gathers rows of an embedding table by token id.
inline Tensor embedding_rows(Tensor table, std::vector<int> ids) {
    detail::require_2d(table, "embedding_rows");
    const std::size_t v = table.rows(), d = table.cols();
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw IndexError("token id " + std::to_string(id) + " out of vocabulary range [0, " +
                             std::to_string(v) + ")");
        }
    }
    std::vector<double> out(ids.size() * d);
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
    return OpBuilder::make({ids.size(), d}, std::move(out), {table},
                           [table, ids, d](const std::vector<double>& g) mutable {
                               if (!table.requires_grad()) return;
                               double* gt = grad_buffer(table);
                               for (std::size_t r = 0; r < ids.size(); ++r)
                                   for (std::size_t c = 0; c < d; ++c)
                                       gt[static_cast<std::size_t>(ids[r]) * d + c] += g[r * d + c];
                           });
}

// ---- reductions / losses ----

inline Tensor sum_all(Tensor x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return OpBuilder::make({1}, {s}, {x}, [x](const std::vector<double>& g) mutable {
        if (!x.requires_grad()) return;
        double* gx = grad_buffer(x);
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
    });
}

inline Tensor mean_all(Tensor x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.data()) s += v;
    return OpBuilder::make({1}, {s * inv}, {x}, [x, inv](const std::vector<double>& g) mutable {
        if (!x.requires_grad()) return;
        double* gx = grad_buffer(x);
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0] * inv;
    });
}

// Mean negative log softmax probability of the targets. Backward yields
// (softmax - onehot) / B on the logits.
inline Tensor softmax_cross_entropy(Tensor logits, std::vector<int> targets) {
    detail::require_2d(logits, "softmax_cross_entropy");
    const std::size_t b = logits.rows(), v = logits.cols();
    if (targets.size() != b) {
        throw ContractError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                            " targets for " + std::to_string(b) + " logit rows");
    }
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw IndexError("target " + std::to_string(t) + " out of range [0, " + std::to_string(v) + ")");
        }
    }
    auto probs = std::make_shared<std::vector<double>>(b * v);
    double loss = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        const double* row = logits.data().data() + r * v;
        double mx = row[0];
        for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < v; ++c) {
            (*probs)[r * v + c] = std::exp(row[c] - mx);
            sum += (*probs)[r * v + c];
        }
        for (std::size_t c = 0; c < v; ++c) (*probs)[r * v + c] /= sum;
        loss += std::log(sum) + mx - row[targets[r]];
    }
    loss /= static_cast<double>(b);
    return OpBuilder::make({1}, {loss}, {logits},
                           [logits, targets, probs, b, v](const std::vector<double>& g) mutable {
                               if (!logits.requires_grad()) return;
                               double* gl = grad_buffer(logits);
                               const double scale = g[0] / static_cast<double>(b);
                               for (std::size_t r = 0; r < b; ++r) {
                                   for (std::size_t c = 0; c < v; ++c)
                                       gl[r * v + c] += scale * (*probs)[r * v + c];
                                   gl[r * v + targets[r]] -= scale;
                               }
                           });
}

inline std::size_t argmax_row(const Tensor& t, std::size_t row) {
    const std::size_t n = t.cols();
    const double* p = t.data().data() + row * n;
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c)
        if (p[c] > p[best]) best = c;
    return best;
}

// ---- parameters ----

struct Parameter {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

// Ordered, name-addressed collection of parameters. Iteration order is
// insertion order, which makes checksums and serialization deterministic.
class ParameterStore {
public:
    // Returns a handle sharing the stored node, so it stays valid as more
    // parameters are added.
    Tensor add(const std::string& name, Tensor t, bool trainable = true) {
        if (index_.count(name)) throw ConflictError("parameter '" + name + "' already registered");
        t.set_requires_grad(trainable);
        index_[name] = params_.size();
        params_.push_back(Parameter{name, t, trainable});
        return t;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    Parameter& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw LookupError("unknown parameter '" + name + "'");
        return params_[it->second];
    }

    const Parameter& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw LookupError("unknown parameter '" + name + "'");
        return params_[it->second];
    }

    std::vector<Parameter>& all() { return params_; }
    const std::vector<Parameter>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    void freeze_all() {
        for (Parameter& p : params_) {
            p.trainable = false;
            p.tensor.set_requires_grad(false);
        }
    }

    void zero_grads() {
        for (Parameter& p : params_) p.tensor.zero_grad();
    }

    bool all_frozen() const {
        for (const Parameter& p : params_)
            if (p.trainable) return false;
        return true;
    }

    std::vector<Tensor> trainable_tensors() const {
        std::vector<Tensor> out;
        for (const Parameter& p : params_)
            if (p.trainable) out.push_back(p.tensor);
        return out;
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const Parameter& p : params_) n += p.tensor.numel();
        return n;
    }

    // Byte-level checksum over names, shapes and raw values.
    std::string checksum() const {
        Sha256 h;
        for (const Parameter& p : params_) {
            h.update(p.name);
            for (std::size_t d : p.tensor.shape()) {
                const std::uint64_t v = d;
                h.update(&v, sizeof(v));
            }
            h.update(p.tensor.data());
        }
        return h.hex_digest();
    }

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---- optimizer ----

struct AdamWConfig {
    double learning_rate = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam. Moments are allocated for trainable
// parameters only; frozen parameters are never touched.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    long step_count() const { return step_count_; }

    // Schedules (warmup, decay) adjust the rate between steps; moments persist.
    void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

    void step(ParameterStore& store) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
        for (Parameter& p : store.all()) {
            if (!p.trainable || p.tensor.numel() == 0) continue;
            if (!p.tensor.has_grad()) {
                throw ContractError("adamw step: trainable parameter '" + p.name + "' has no gradient");
            }
            auto& m = moments_[p.name];
            if (m.first_moment.empty()) {
                m.first_moment.assign(p.tensor.numel(), 0.0);
                m.second_moment.assign(p.tensor.numel(), 0.0);
            }
            const std::vector<double>& g = p.tensor.grad();
            std::vector<double>& data = p.tensor.data();
            for (std::size_t i = 0; i < data.size(); ++i) {
                m.first_moment[i] = cfg_.beta1 * m.first_moment[i] + (1.0 - cfg_.beta1) * g[i];
                m.second_moment[i] = cfg_.beta2 * m.second_moment[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m.first_moment[i] / bc1;
                const double vhat = m.second_moment[i] / bc2;
                data[i] -= cfg_.learning_rate *
                           (mhat / (std::sqrt(vhat) + cfg_.epsilon) + cfg_.weight_decay * data[i]);
            }
        }
    }

    bool has_moments_for(const std::string& name) const { return moments_.count(name) > 0; }

private:
    struct Moments {
        std::vector<double> first_moment;
        std::vector<double> second_moment;
    };
    AdamWConfig cfg_;
    long step_count_ = 0;
    std::unordered_map<std::string, Moments> moments_;
};

// ---- gradient checking ----

struct GradCheckOptions {
    double epsilon = 1e-4;
    // 0 checks every coordinate; otherwise this many coordinates are sampled
    // per tensor (deterministically).
    std::size_t max_coords_per_tensor = 0;
    std::uint64_t seed = 0x9dc4f1a35b27e681ULL;
};

// Compares analytic gradients of a deterministic scalar-valued forward pass
// against central finite differences. Returns the max relative error
// |analytic - numeric| / max(1, |analytic|, |numeric|) over checked coords.
inline double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         GradCheckOptions opts = {}) {
    for (const Tensor& p : params) {
        Tensor t = p;
        t.zero_grad();
    }
    Tensor loss = f();
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params) {
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));
    }

    Rng rng(opts.seed);
    double max_rel = 0.0;
    NoGradGuard no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        std::vector<std::size_t> coords;
        if (opts.max_coords_per_tensor == 0 || p.numel() <= opts.max_coords_per_tensor) {
            coords.resize(p.numel());
            std::iota(coords.begin(), coords.end(), 0);
        } else {
            std::unordered_set<std::size_t> chosen;
            while (chosen.size() < opts.max_coords_per_tensor)
                chosen.insert(static_cast<std::size_t>(rng.uniform_int(p.numel())));
            coords.assign(chosen.begin(), chosen.end());
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t ci : coords) {
            const double saved = p.data()[ci];
            p.data()[ci] = saved + opts.epsilon;
            const double up = f().item();
            p.data()[ci] = saved - opts.epsilon;
            const double down = f().item();
            p.data()[ci] = saved;
            const double numeric = (up - down) / (2.0 * opts.epsilon);
            const double a = analytic[pi][ci];
            const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace davqa
