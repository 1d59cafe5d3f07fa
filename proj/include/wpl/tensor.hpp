#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "wpl/errors.hpp"
#include "wpl/rng.hpp"

namespace wpl {

// Dense row-major tensors with dynamic tape-based reverse mode. Training runs
// in float; gradient-check tests instantiate the same code with double.
// Values are immutable once an op has produced them; backward() walks the
// recorded graph. Matrix products are delegated to Eigen behind the op
// contracts.

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapMat = Eigen::Map<const RowMat<S>>;
template <typename S>
using MapArr = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using CMapArr = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Per-thread tape switch; inference forwards disable recording.
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
};

template <typename S>
struct Node;

// Transient gradient buffers keyed by node, used while walking the tape.
template <typename S>
class GradTable {
public:
    std::vector<S>& at(Node<S>* n, int64_t numel) {
        auto& v = m_[n];
        if (v.empty()) v.assign(size_t(numel), S(0));
        return v;
    }
    std::vector<S>* find(Node<S>* n) {
        auto it = m_.find(n);
        return it == m_.end() ? nullptr : &it->second;
    }
    void erase(Node<S>* n) { m_.erase(n); }
    std::unordered_map<Node<S>*, std::vector<S>>& map() { return m_; }

private:
    std::unordered_map<Node<S>*, std::vector<S>> m_;
};

// Leaf gradients routed somewhere other than Node::grad (used by the batch
// runner so worker threads never write shared state).
template <typename S>
using GradSink = std::unordered_map<const Node<S>*, std::vector<S>>;

template <typename S>
struct Node {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad; // persistent accumulator, sized on first use
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<S>>> parents;
    // Consumes this node's gradient, adds contributions to parents' buffers.
    std::function<void(const std::vector<S>&, GradTable<S>&)> backfn;

    int64_t numel() const { return shape_numel(shape); }
};

template <typename S>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(Shape shape) { return filled(std::move(shape), S(0)); }

    static TensorT filled(Shape shape, S v) {
        TensorT t;
        t.n_ = std::make_shared<Node<S>>();
        t.n_->shape = std::move(shape);
        t.n_->value.assign(size_t(t.n_->numel()), v);
        return t;
    }

    static TensorT from_data(Shape shape, std::vector<S> data) {
        if (shape_numel(shape) != int64_t(data.size()))
            throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        TensorT t;
        t.n_ = std::make_shared<Node<S>>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        return t;
    }

    static TensorT randn(Shape shape, RngStream& rng, double stddev = 1.0) {
        TensorT t = zeros(std::move(shape));
        for (auto& v : t.n_->value) v = S(rng.normal() * stddev);
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int rows() const { return n_->shape.at(0); }
    int cols() const { return n_->shape.at(1); }
    int64_t numel() const { return n_->numel(); }
    int ndim() const { return int(n_->shape.size()); }

    const std::vector<S>& data() const { return n_->value; }
    std::vector<S>& mutable_data() { return n_->value; }
    S item() const {
        if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
        return n_->value[0];
    }

    TensorT& set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        return *this;
    }
    bool requires_grad() const { return n_->requires_grad; }

    const std::vector<S>& grad() const {
        if (n_->grad.empty()) throw std::runtime_error("grad accessed before backward()");
        return n_->grad;
    }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
    }

    // Reverse-mode sweep from a scalar root. Gradients of requires_grad
    // leaves accumulate into their persistent .grad, or into `sink` when
    // given (leaving all shared nodes untouched).
    void backward(GradSink<S>* sink = nullptr) const {
        if (numel() != 1) throw std::invalid_argument("backward() root must be scalar, got " + shape_str(shape()));
        // topological order via iterative post-order DFS
        std::vector<Node<S>*> order;
        std::unordered_map<Node<S>*, int> state; // 0 new, 1 open, 2 done
        std::vector<Node<S>*> stack{n_.get()};
        while (!stack.empty()) {
            Node<S>* cur = stack.back();
            int& st = state[cur];
            if (st == 0) {
                st = 1;
                for (auto& p : cur->parents)
                    if (p->requires_grad && state[p.get()] == 0) stack.push_back(p.get());
            } else {
                stack.pop_back();
                if (st == 1) {
                    st = 2;
                    order.push_back(cur);
                }
            }
        }
        GradTable<S> table;
        table.at(n_.get(), 1)[0] = S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<S>* cur = *it;
            std::vector<S>* g = table.find(cur);
            if (!g) continue;
            if (cur->backfn) {
                cur->backfn(*g, table);
            } else if (cur->requires_grad) {
                if (sink) {
                    auto& acc = (*sink)[cur];
                    if (acc.empty()) acc.assign(g->size(), S(0));
                    for (size_t i = 0; i < g->size(); ++i) acc[i] += (*g)[i];
                } else {
                    if (cur->grad.empty()) cur->grad.assign(g->size(), S(0));
                    for (size_t i = 0; i < g->size(); ++i) cur->grad[i] += (*g)[i];
                }
            }
            table.erase(cur);
        }
    }

    Node<S>* node() const { return n_.get(); }
    const std::shared_ptr<Node<S>>& node_ptr() const { return n_; }

    // --- op plumbing ---
    static TensorT make_result(Shape shape, std::vector<std::shared_ptr<Node<S>>> parents) {
        TensorT t;
        t.n_ = std::make_shared<Node<S>>();
        t.n_->shape = std::move(shape);
        t.n_->value.resize(size_t(t.n_->numel()));
        bool rg = false;
        if (grad_enabled())
            for (auto& p : parents) rg = rg || p->requires_grad;
        if (rg) {
            t.n_->requires_grad = true;
            t.n_->parents = std::move(parents);
        }
        return t;
    }

private:
    std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <typename S>
void require_2d(const TensorT<S>& t, const char* op) {
    if (t.ndim() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename S>
CMapMat<S> mat(const TensorT<S>& t) {
    return CMapMat<S>(t.data().data(), t.rows(), t.cols());
}
template <typename S>
MapMat<S> mat_mut(TensorT<S>& t) {
    return MapMat<S>(t.mutable_data().data(), t.rows(), t.cols());
}
template <typename S>
CMapMat<S> mat_of(const std::vector<S>& v, int r, int c) {
    return CMapMat<S>(v.data(), r, c);
}
template <typename S>
MapMat<S> mat_of_mut(std::vector<S>& v, int r, int c) {
    return MapMat<S>(v.data(), r, c);
}

// in-place row softmax with max subtraction; rows of `m` become probabilities
template <typename S>
void softmax_rows_inplace(MapMat<S> m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        S mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        S sum = row.sum();
        row /= sum;
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions disagree " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    auto out = TensorT<S>::make_result({m, n}, {a.node_ptr(), b.node_ptr()});
    detail::mat_mut(out).noalias() = detail::mat(a) * detail::mat(b);
    if (out.requires_grad()) {
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        out.node()->backfn = [an, bn, m, k, n](const std::vector<S>& g, GradTable<S>& t) {
            auto gc = detail::mat_of(g, m, n);
            if (an->requires_grad) {
                auto& ga = t.at(an.get(), an->numel());
                detail::mat_of_mut(ga, m, k).noalias() += gc * detail::mat_of(bn->value, k, n).transpose();
            }
            if (bn->requires_grad) {
                auto& gb = t.at(bn.get(), bn->numel());
                detail::mat_of_mut(gb, k, n).noalias() += detail::mat_of(an->value, m, k).transpose() * gc;
            }
        };
    }
    return out;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "add");
    auto out = TensorT<S>::make_result(a.shape(), {a.node_ptr(), b.node_ptr()});
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mutable_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (out.requires_grad()) {
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        out.node()->backfn = [an, bn](const std::vector<S>& g, GradTable<S>& t) {
            for (auto* n : {an.get(), bn.get()}) {
                if (!n->requires_grad) continue;
                auto& gn = t.at(n, n->numel());
                for (size_t i = 0; i < g.size(); ++i) gn[i] += g[i];
            }
        };
    }
    return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "sub");
    auto out = TensorT<S>::make_result(a.shape(), {a.node_ptr(), b.node_ptr()});
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mutable_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (out.requires_grad()) {
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        out.node()->backfn = [an, bn](const std::vector<S>& g, GradTable<S>& t) {
            if (an->requires_grad) {
                auto& ga = t.at(an.get(), an->numel());
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = t.at(bn.get(), bn->numel());
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    }
    return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "mul");
    auto out = TensorT<S>::make_result(a.shape(), {a.node_ptr(), b.node_ptr()});
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mutable_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (out.requires_grad()) {
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        out.node()->backfn = [an, bn](const std::vector<S>& g, GradTable<S>& t) {
            if (an->requires_grad) {
                auto& ga = t.at(an.get(), an->numel());
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                auto& gb = t.at(bn.get(), bn->numel());
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
            }
        };
    }
    return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
    auto out = TensorT<S>::make_result(a.shape(), {a.node_ptr()});
    const auto& av = a.data();
    auto& ov = out.mutable_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    if (out.requires_grad()) {
        auto an = a.node_ptr();
        out.node()->backfn = [an, c](const std::vector<S>& g, GradTable<S>& t) {
            auto& ga = t.at(an.get(), an->numel());
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        };
    }
    return out;
}

// x[R×C] + b[C] broadcast over rows
template <typename S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& b) {
    detail::require_2d(x, "add_bias");
    if (b.ndim() != 1 || b.shape()[0] != x.cols())
        throw std::invalid_argument("add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
    const int R = x.rows(), C = x.cols();
    auto out = TensorT<S>::make_result(x.shape(), {x.node_ptr(), b.node_ptr()});
    const auto& xv = x.data();
    const auto& bv = b.data();
    auto& ov = out.mutable_data();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) ov[size_t(r) * C + c] = xv[size_t(r) * C + c] + bv[c];
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto bn = b.node_ptr();
        out.node()->backfn = [xn, bn, R, C](const std::vector<S>& g, GradTable<S>& t) {
            if (xn->requires_grad) {
                auto& gx = t.at(xn.get(), xn->numel());
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = t.at(bn.get(), bn->numel());
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gb[c] += g[size_t(r) * C + c];
            }
        };
    }
    return out;
}

// x[R×C] ⊙ v[C] broadcast over rows (channel gain / gate)
template <typename S>
TensorT<S> mul_channels(const TensorT<S>& x, const TensorT<S>& v) {
    detail::require_2d(x, "mul_channels");
    if (v.ndim() != 1 || v.shape()[0] != x.cols())
        throw std::invalid_argument("mul_channels: vector " + shape_str(v.shape()) + " does not match " + shape_str(x.shape()));
    const int R = x.rows(), C = x.cols();
    auto out = TensorT<S>::make_result(x.shape(), {x.node_ptr(), v.node_ptr()});
    const auto& xv = x.data();
    const auto& vv = v.data();
    auto& ov = out.mutable_data();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) ov[size_t(r) * C + c] = xv[size_t(r) * C + c] * vv[c];
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto vn = v.node_ptr();
        out.node()->backfn = [xn, vn, R, C](const std::vector<S>& g, GradTable<S>& t) {
            if (xn->requires_grad) {
                auto& gx = t.at(xn.get(), xn->numel());
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gx[size_t(r) * C + c] += g[size_t(r) * C + c] * vn->value[c];
            }
            if (vn->requires_grad) {
                auto& gv = t.at(vn.get(), vn->numel());
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gv[c] += g[size_t(r) * C + c] * xn->value[size_t(r) * C + c];
            }
        };
    }
    return out;
}

// x[R×C] with row r scaled by s[r]
template <typename S>
TensorT<S> scale_rows(const TensorT<S>& x, const TensorT<S>& s) {
    detail::require_2d(x, "scale_rows");
    if (s.ndim() != 1 || s.shape()[0] != x.rows())
        throw std::invalid_argument("scale_rows: vector " + shape_str(s.shape()) + " does not match " + shape_str(x.shape()));
    const int R = x.rows(), C = x.cols();
    auto out = TensorT<S>::make_result(x.shape(), {x.node_ptr(), s.node_ptr()});
    const auto& xv = x.data();
    const auto& sv = s.data();
    auto& ov = out.mutable_data();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) ov[size_t(r) * C + c] = xv[size_t(r) * C + c] * sv[r];
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto sn = s.node_ptr();
        out.node()->backfn = [xn, sn, R, C](const std::vector<S>& g, GradTable<S>& t) {
            if (xn->requires_grad) {
                auto& gx = t.at(xn.get(), xn->numel());
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gx[size_t(r) * C + c] += g[size_t(r) * C + c] * sn->value[r];
            }
            if (sn->requires_grad) {
                auto& gs = t.at(sn.get(), sn->numel());
                for (int r = 0; r < R; ++r) {
                    S acc = 0;
                    for (int c = 0; c < C; ++c) acc += g[size_t(r) * C + c] * xn->value[size_t(r) * C + c];
                    gs[r] += acc;
                }
            }
        };
    }
    return out;
}

template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
    auto out = TensorT<S>::make_result(x.shape(), {x.node_ptr()});
    const auto& xv = x.data();
    auto& ov = out.mutable_data();
    const S inv_sqrt2 = S(0.7071067811865475244);
    for (size_t i = 0; i < ov.size(); ++i) {
        S v = xv[i];
        ov[i] = S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
    }
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        out.node()->backfn = [xn, inv_sqrt2](const std::vector<S>& g, GradTable<S>& t) {
            auto& gx = t.at(xn.get(), xn->numel());
            const S inv_sqrt2pi = S(0.3989422804014326779);
            for (size_t i = 0; i < g.size(); ++i) {
                S v = xn->value[i];
                S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
                S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        };
    }
    return out;
}

template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
    detail::require_2d(x, "softmax_rows");
    for (S v : x.data())
        if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
    auto out = TensorT<S>::make_result(x.shape(), {x.node_ptr()});
    out.mutable_data() = x.data();
    detail::softmax_rows_inplace(detail::mat_mut(out));
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        const int R = x.rows(), C = x.cols();
        out.node()->backfn = [xn, on, R, C](const std::vector<S>& g, GradTable<S>& t) {
            auto& gx = t.at(xn.get(), xn->numel());
            for (int r = 0; r < R; ++r) {
                const S* y = on->value.data() + size_t(r) * C;
                const S* gr = g.data() + size_t(r) * C;
                S dot = 0;
                for (int c = 0; c < C; ++c) dot += gr[c] * y[c];
                S* gxr = gx.data() + size_t(r) * C;
                for (int c = 0; c < C; ++c) gxr[c] += (gr[c] - dot) * y[c];
            }
        };
    }
    return out;
}

// last-axis standardization with affine; works on [R×D] and [D]
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, S eps = S(1e-5)) {
    if (eps <= S(0)) throw std::invalid_argument("layer_norm: eps must be positive");
    const int D = x.shape().back();
    if (gain.ndim() != 1 || gain.shape()[0] != D || bias.ndim() != 1 || bias.shape()[0] != D)
        throw std::invalid_argument("layer_norm: affine params " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                                    " do not match " + shape_str(x.shape()));
    const int R = int(x.numel() / D);
    auto out = TensorT<S>::make_result(x.shape(), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()});
    auto stats = std::make_shared<std::vector<S>>(size_t(R) * 2); // mean, inv-std per row
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    auto& ov = out.mutable_data();
    for (int r = 0; r < R; ++r) {
        const S* xr = xv.data() + size_t(r) * D;
        S mean = 0;
        for (int c = 0; c < D; ++c) mean += xr[c];
        mean /= S(D);
        S var = 0;
        for (int c = 0; c < D; ++c) {
            S d = xr[c] - mean;
            var += d * d;
        }
        var /= S(D);
        S inv = S(1) / std::sqrt(var + eps);
        (*stats)[size_t(r) * 2] = mean;
        (*stats)[size_t(r) * 2 + 1] = inv;
        S* orow = ov.data() + size_t(r) * D;
        for (int c = 0; c < D; ++c) orow[c] = (xr[c] - mean) * inv * gv[c] + bv[c];
    }
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        auto gn = gain.node_ptr();
        auto bn = bias.node_ptr();
        out.node()->backfn = [xn, gn, bn, stats, R, D](const std::vector<S>& g, GradTable<S>& t) {
            std::vector<S>* gx = xn->requires_grad ? &t.at(xn.get(), xn->numel()) : nullptr;
            std::vector<S>* gg = gn->requires_grad ? &t.at(gn.get(), gn->numel()) : nullptr;
            std::vector<S>* gb = bn->requires_grad ? &t.at(bn.get(), bn->numel()) : nullptr;
            for (int r = 0; r < R; ++r) {
                const S mean = (*stats)[size_t(r) * 2];
                const S inv = (*stats)[size_t(r) * 2 + 1];
                const S* xr = xn->value.data() + size_t(r) * D;
                const S* gr = g.data() + size_t(r) * D;
                S sum_dy = 0, sum_dyy = 0;
                for (int c = 0; c < D; ++c) {
                    S yhat = (xr[c] - mean) * inv;
                    S dy = gr[c] * gn->value[c];
                    sum_dy += dy;
                    sum_dyy += dy * yhat;
                    if (gg) (*gg)[c] += gr[c] * yhat;
                    if (gb) (*gb)[c] += gr[c];
                }
                if (gx) {
                    S* gxr = gx->data() + size_t(r) * D;
                    for (int c = 0; c < D; ++c) {
                        S yhat = (xr[c] - mean) * inv;
                        S dy = gr[c] * gn->value[c];
                        gxr[c] += inv * (dy - sum_dy / S(D) - yhat * sum_dyy / S(D));
                    }
                }
            }
        };
    }
    return out;
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    auto out = TensorT<S>::make_result(std::move(new_shape), {x.node_ptr()});
    out.mutable_data() = x.data();
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        out.node()->backfn = [xn](const std::vector<S>& g, GradTable<S>& t) {
            auto& gx = t.at(xn.get(), xn->numel());
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        };
    }
    return out;
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& x) {
    detail::require_2d(x, "transpose");
    const int R = x.rows(), C = x.cols();
    auto out = TensorT<S>::make_result({C, R}, {x.node_ptr()});
    detail::mat_mut(out) = detail::mat(x).transpose();
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        out.node()->backfn = [xn, R, C](const std::vector<S>& g, GradTable<S>& t) {
            auto& gx = t.at(xn.get(), xn->numel());
            detail::mat_of_mut(gx, R, C) += detail::mat_of(g, C, R).transpose();
        };
    }
    return out;
}

// concat along axis 0 (rows) or 1 (cols) of 2-D tensors
template <typename S>
TensorT<S> concat(int axis, const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
    for (const auto& p : parts) detail::require_2d(p, "concat");
    const int fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
    int total = 0;
    std::vector<std::shared_ptr<Node<S>>> ps;
    for (const auto& p : parts) {
        int f = axis == 0 ? p.cols() : p.rows();
        if (f != fixed)
            throw std::invalid_argument("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        total += axis == 0 ? p.rows() : p.cols();
        ps.push_back(p.node_ptr());
    }
    Shape os = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
    auto out = TensorT<S>::make_result(os, ps);
    auto om = detail::mat_mut(out);
    int off = 0;
    for (const auto& p : parts) {
        if (axis == 0) {
            om.middleRows(off, p.rows()) = detail::mat(p);
            off += p.rows();
        } else {
            om.middleCols(off, p.cols()) = detail::mat(p);
            off += p.cols();
        }
    }
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<Node<S>>> nodes = ps;
        std::vector<int> sizes;
        for (const auto& p : parts) sizes.push_back(axis == 0 ? p.rows() : p.cols());
        const int R = out.rows(), C = out.cols();
        out.node()->backfn = [nodes, sizes, axis, R, C](const std::vector<S>& g, GradTable<S>& t) {
            auto gm = detail::mat_of(g, R, C);
            int off2 = 0;
            for (size_t i = 0; i < nodes.size(); ++i) {
                auto& n = nodes[i];
                if (n->requires_grad) {
                    auto& gn = t.at(n.get(), n->numel());
                    int nr = n->shape[0], nc = n->shape[1];
                    if (axis == 0)
                        detail::mat_of_mut(gn, nr, nc) += gm.middleRows(off2, sizes[i]);
                    else
                        detail::mat_of_mut(gn, nr, nc) += gm.middleCols(off2, sizes[i]);
                }
                off2 += sizes[i];
            }
        };
    }
    return out;
}

// contiguous slice along an axis of a 2-D tensor, [begin, end)
template <typename S>
TensorT<S> slice(const TensorT<S>& x, int axis, int begin, int end) {
    detail::require_2d(x, "slice");
    const int limit = axis == 0 ? x.rows() : x.cols();
    if (axis != 0 && axis != 1) throw std::invalid_argument("slice: axis must be 0 or 1");
    if (begin < 0 || end > limit || begin >= end)
        throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                                    shape_str(x.shape()));
    const int R = x.rows(), C = x.cols();
    Shape os = axis == 0 ? Shape{end - begin, C} : Shape{R, end - begin};
    auto out = TensorT<S>::make_result(os, {x.node_ptr()});
    if (axis == 0)
        detail::mat_mut(out) = detail::mat(x).middleRows(begin, end - begin);
    else
        detail::mat_mut(out) = detail::mat(x).middleCols(begin, end - begin);
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        const int or_ = out.rows(), oc = out.cols();
        out.node()->backfn = [xn, axis, begin, R, C, or_, oc](const std::vector<S>& g, GradTable<S>& t) {
            auto& gx = t.at(xn.get(), xn->numel());
            auto gm = detail::mat_of(g, or_, oc);
            if (axis == 0)
                detail::mat_of_mut(gx, R, C).middleRows(begin, or_) += gm;
            else
                detail::mat_of_mut(gx, R, C).middleCols(begin, oc) += gm;
        };
    }
    return out;
}

// row gather; doubles as embedding lookup when `table` is a parameter
template <typename S>
TensorT<S> gather_rows(const TensorT<S>& table, const std::vector<int>& ids) {
    detail::require_2d(table, "gather_rows");
    const int V = table.rows(), D = table.cols();
    for (int id : ids)
        if (id < 0 || id >= V)
            throw std::invalid_argument("gather_rows: index " + std::to_string(id) + " out of [0," + std::to_string(V) + ")");
    auto out = TensorT<S>::make_result({int(ids.size()), D}, {table.node_ptr()});
    const auto& tv = table.data();
    auto& ov = out.mutable_data();
    for (size_t r = 0; r < ids.size(); ++r)
        std::copy_n(tv.data() + size_t(ids[r]) * D, D, ov.data() + r * D);
    if (out.requires_grad()) {
        auto tn = table.node_ptr();
        auto idv = ids;
        out.node()->backfn = [tn, idv, D](const std::vector<S>& g, GradTable<S>& t) {
            auto& gt = t.at(tn.get(), tn->numel());
            for (size_t r = 0; r < idv.size(); ++r) {
                S* dst = gt.data() + size_t(idv[r]) * D;
                const S* src = g.data() + r * D;
                for (int c = 0; c < D; ++c) dst[c] += src[c];
            }
        };
    }
    return out;
}

template <typename S>
TensorT<S> embedding(const TensorT<S>& table, const std::vector<int>& ids) {
    return gather_rows(table, ids);
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
    auto out = TensorT<S>::make_result({}, {x.node_ptr()});
    S acc = 0;
    for (S v : x.data()) acc += v;
    out.mutable_data()[0] = acc;
    if (out.requires_grad()) {
        auto xn = x.node_ptr();
        out.node()->backfn = [xn](const std::vector<S>& g, GradTable<S>& t) {
            auto& gx = t.at(xn.get(), xn->numel());
            for (auto& v : gx) v += g[0];
        };
    }
    return out;
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& x) {
    return scale(sum_all(x), S(1) / S(x.numel()));
}

// Fused multi-head self-attention over one sequence.
//   q, k, v: [T × D] with D = heads·head_dim; out: [T × D]
// Softmax rows of every head are kept for the backward pass and can be
// exposed to attention probes via `record`.
template <typename S>
TensorT<S> multi_head_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v, int heads,
                                std::vector<std::vector<S>>* record = nullptr) {
    detail::require_2d(q, "attention");
    detail::require_same_shape(q, k, "attention");
    detail::require_same_shape(q, v, "attention");
    const int T = q.rows(), D = q.cols();
    if (D % heads != 0) throw std::invalid_argument("attention: model dim " + std::to_string(D) + " not divisible by heads");
    const int hd = D / heads;
    const S sc = S(1) / std::sqrt(S(hd));

    auto out = TensorT<S>::make_result({T, D}, {q.node_ptr(), k.node_ptr(), v.node_ptr()});
    auto probs = std::make_shared<std::vector<RowMat<S>>>(); // per-head [T×T]
    probs->reserve(heads);
    auto qm = detail::mat(q), km = detail::mat(k), vm = detail::mat(v);
    auto om = detail::mat_mut(out);
    for (int h = 0; h < heads; ++h) {
        RowMat<S> p(T, T);
        p.noalias() = qm.middleCols(h * hd, hd) * km.middleCols(h * hd, hd).transpose();
        p *= sc;
        detail::softmax_rows_inplace(MapMat<S>(p.data(), T, T));
        om.middleCols(h * hd, hd).noalias() = p * vm.middleCols(h * hd, hd);
        if (record) record->emplace_back(p.data(), p.data() + size_t(T) * T);
        probs->push_back(std::move(p));
    }
    if (out.requires_grad()) {
        auto qn = q.node_ptr();
        auto kn = k.node_ptr();
        auto vn = v.node_ptr();
        out.node()->backfn = [qn, kn, vn, probs, heads, hd, sc, T, D](const std::vector<S>& g, GradTable<S>& t) {
            auto gm = detail::mat_of(g, T, D);
            auto qm2 = detail::mat_of(qn->value, T, D);
            auto km2 = detail::mat_of(kn->value, T, D);
            auto vm2 = detail::mat_of(vn->value, T, D);
            std::vector<S>* gq = qn->requires_grad ? &t.at(qn.get(), qn->numel()) : nullptr;
            std::vector<S>* gk = kn->requires_grad ? &t.at(kn.get(), kn->numel()) : nullptr;
            std::vector<S>* gv = vn->requires_grad ? &t.at(vn.get(), vn->numel()) : nullptr;
            for (int h = 0; h < heads; ++h) {
                const RowMat<S>& p = (*probs)[h];
                auto go = gm.middleCols(h * hd, hd);
                if (gv) {
                    detail::mat_of_mut(*gv, T, D).middleCols(h * hd, hd).noalias() += p.transpose() * go;
                }
                if (gq || gk) {
                    RowMat<S> dp(T, T);
                    dp.noalias() = go * vm2.middleCols(h * hd, hd).transpose();
                    // softmax backward per row, then score scale
                    for (int r = 0; r < T; ++r) {
                        S dot = 0;
                        const S* pr = p.data() + size_t(r) * T;
                        S* dpr = dp.data() + size_t(r) * T;
                        for (int c = 0; c < T; ++c) dot += dpr[c] * pr[c];
                        for (int c = 0; c < T; ++c) dpr[c] = (dpr[c] - dot) * pr[c] * sc;
                    }
                    if (gq) detail::mat_of_mut(*gq, T, D).middleCols(h * hd, hd).noalias() += dp * km2.middleCols(h * hd, hd);
                    if (gk) detail::mat_of_mut(*gk, T, D).middleCols(h * hd, hd).noalias() += dp.transpose() * qm2.middleCols(h * hd, hd);
                }
            }
        };
    }
    return out;
}

using Tensor = TensorT<float>;

} // namespace wpl
