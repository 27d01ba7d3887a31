#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "cape/common.hpp"

namespace cape {

class Tape;

/// Dense row-major tensor of 64-bit floats. Data is shared and immutable;
/// copies are cheap. A tensor is optionally attached to a gradient tape, in
/// which case operations on it are recorded for reverse-mode differentiation.
class Tensor {
  public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)),
          data_(std::make_shared<const std::vector<double>>(std::move(data))) {
        if (numel(shape_) != data_->size())
            throw ShapeError("Tensor: " + shape_str(shape_) + " does not hold " +
                             std::to_string(data_->size()) + " values");
    }

    explicit Tensor(double scalar) : Tensor({1}, {scalar}) {}

    static Tensor zeros(std::vector<std::size_t> shape) {
        std::vector<double> d(numel(shape), 0.0);
        return Tensor(std::move(shape), std::move(d));
    }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        std::vector<double> d(numel(shape), v);
        return Tensor(std::move(shape), std::move(d));
    }

    static Tensor identity(std::size_t n) {
        std::vector<double> d(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
        return Tensor({n, n}, std::move(d));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    bool empty() const { return size() == 0; }

    std::size_t rows() const { return dim(0); }
    std::size_t cols() const { return dim(1); }
    std::size_t dim(std::size_t i) const { return i < shape_.size() ? shape_[i] : 1; }

    const std::vector<double>& data() const { return *data_; }
    const std::shared_ptr<const std::vector<double>>& data_ptr() const { return data_; }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }

    /// Value of a single-element tensor.
    double item() const {
        if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
        return (*data_)[0];
    }

    bool on_tape() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

    /// Same values, no tape attachment.
    Tensor detached() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    /// Returns a copy with the same shape but fresh data.
    Tensor with_data(std::vector<double> d) const {
        return Tensor(shape_, std::move(d));
    }

    static std::size_t numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (auto e : shape) n *= e;
        return n;
    }

  private:
    std::vector<std::size_t> shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;

    friend class Tape;
};

/// Define-by-run gradient tape. Nodes are recorded in execution order, so
/// parents always precede children and a single reverse sweep is a valid
/// topological traversal.
class Tape {
  public:
    using BackwardFn = std::function<void(const std::vector<double>& out_grad, Tape& tape)>;

    /// Attaches a value to the tape as a differentiable leaf.
    Tensor leaf(const Tensor& value) {
        return make(value.shape(), std::vector<double>(value.data()), {}, nullptr);
    }

    Tensor make(std::vector<std::size_t> shape, std::vector<double> data,
                std::vector<int> parents, BackwardFn backward) {
        Tensor t(std::move(shape), std::move(data));
        t.tape_ = this;
        t.node_ = static_cast<int>(nodes_.size());
        nodes_.push_back(NodeRec{t.shape_, std::move(parents), std::move(backward)});
        return t;
    }

    std::size_t node_count() const { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Reachable nodes are visited exactly
    /// once, children before parents.
    void backward(const Tensor& loss) {
        if (loss.tape() != this) throw Error("backward: loss is not on this tape");
        if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        grads_.assign(nodes_.size(), {});
        std::vector<char> reachable(nodes_.size(), 0);
        std::vector<int> stack{loss.node()};
        reachable[loss.node()] = 1;
        while (!stack.empty()) {
            int id = stack.back();
            stack.pop_back();
            for (int p : nodes_[id].parents) {
                if (!reachable[p]) {
                    reachable[p] = 1;
                    stack.push_back(p);
                }
            }
        }
        grad_buf(loss.node())[0] = 1.0;
        for (int id = loss.node(); id >= 0; --id) {
            if (!reachable[id] || !nodes_[id].backward) continue;
            nodes_[id].backward(grad_buf(id), *this);
        }
    }

    /// Gradient of the last backward() pass w.r.t. a tensor on this tape.
    Tensor grad(const Tensor& t) const {
        if (t.tape() != this) throw Error("grad: tensor is not on this tape");
        if (t.node() < 0 || static_cast<std::size_t>(t.node()) >= grads_.size() || grads_[t.node()].empty())
            return Tensor::zeros(t.shape());
        return Tensor(t.shape(), grads_[t.node()]);
    }

    std::vector<double>& grad_buf(int id) {
        if (grads_.size() != nodes_.size()) grads_.assign(nodes_.size(), {});
        auto& g = grads_[id];
        if (g.empty()) g.assign(Tensor::numel(nodes_[id].shape), 0.0);
        return g;
    }

  private:
    struct NodeRec {
        std::vector<std::size_t> shape;
        std::vector<int> parents;
        BackwardFn backward;
    };
    std::vector<NodeRec> nodes_;
    std::vector<std::vector<double>> grads_;
};

namespace detail {

inline Tape* result_tape(std::initializer_list<const Tensor*> ins) {
    Tape* t = nullptr;
    for (const Tensor* in : ins) {
        if (!in->on_tape()) continue;
        if (t && t != in->tape()) throw Error("operands live on different tapes");
        t = in->tape();
    }
    return t;
}

inline std::vector<int> parent_ids(std::initializer_list<const Tensor*> ins) {
    std::vector<int> ids;
    for (const Tensor* in : ins)
        if (in->on_tape()) ids.push_back(in->node());
    return ids;
}

inline std::shared_ptr<const std::vector<double>> share(const Tensor& t) { return t.data_ptr(); }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

inline void require_rank2(const Tensor& a, const char* op) {
    if (a.rank() != 2)
        throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(a.shape()));
}

// Builds the result tensor, recording a backward closure only when an input
// is attached to a tape. `backward` receives (g_out, tape).
template <class Backward>
Tensor unary_op(const Tensor& x, std::vector<std::size_t> shape, std::vector<double> data,
                Backward&& backward) {
    Tape* tape = result_tape({&x});
    if (!tape) return Tensor(std::move(shape), std::move(data));
    int xid = x.node();
    return tape->make(std::move(shape), std::move(data), {xid},
                      [backward = std::forward<Backward>(backward), xid](
                          const std::vector<double>& g, Tape& t) { backward(g, t.grad_buf(xid)); });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = ad[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = &bd[kk * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }

    Tape* tape = detail::result_tape({&a, &b});
    if (!tape) return Tensor({m, n}, std::move(out));
    auto ad_s = detail::share(a);
    auto bd_s = detail::share(b);
    const int aid = a.node(), bid = b.node();
    return tape->make(
        {m, n}, std::move(out), detail::parent_ids({&a, &b}),
        [m, k, n, ad_s, bd_s, aid, bid](const std::vector<double>& g, Tape& t) {
            if (aid >= 0) {
                auto& ga = t.grad_buf(aid);  // g . b^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        double s = 0.0;
                        const double* grow = &g[i * n];
                        const double* brow = &(*bd_s)[kk * n];
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ga[i * k + kk] += s;
                    }
            }
            if (bid >= 0) {
                auto& gb = t.grad_buf(bid);  // a^T . g
                for (std::size_t kk = 0; kk < k; ++kk)
                    for (std::size_t i = 0; i < m; ++i) {
                        const double av = (*ad_s)[i * k + kk];
                        if (av == 0.0) continue;
                        const double* grow = &g[i * n];
                        double* gbrow = &gb[kk * n];
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
            }
        });
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank2(x, "transpose");
    const std::size_t r = x.rows(), c = x.cols();
    std::vector<double> out(r * c);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xd[i * c + j];
    return detail::unary_op(x, {c, r}, std::move(out),
                            [r, c](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
                            });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Tape* tape = detail::result_tape({&a, &b});
    if (!tape) return a.with_data(std::move(out));
    const int aid = a.node(), bid = b.node();
    return tape->make(a.shape(), std::move(out), detail::parent_ids({&a, &b}),
                      [aid, bid](const std::vector<double>& g, Tape& t) {
                          if (aid >= 0) {
                              auto& ga = t.grad_buf(aid);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (bid >= 0) {
                              auto& gb = t.grad_buf(bid);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                          }
                      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    Tape* tape = detail::result_tape({&a, &b});
    if (!tape) return a.with_data(std::move(out));
    const int aid = a.node(), bid = b.node();
    return tape->make(a.shape(), std::move(out), detail::parent_ids({&a, &b}),
                      [aid, bid](const std::vector<double>& g, Tape& t) {
                          if (aid >= 0) {
                              auto& ga = t.grad_buf(aid);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (bid >= 0) {
                              auto& gb = t.grad_buf(bid);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tape* tape = detail::result_tape({&a, &b});
    if (!tape) return a.with_data(std::move(out));
    auto ad = detail::share(a);
    auto bd = detail::share(b);
    const int aid = a.node(), bid = b.node();
    return tape->make(a.shape(), std::move(out), detail::parent_ids({&a, &b}),
                      [ad, bd, aid, bid](const std::vector<double>& g, Tape& t) {
                          if (aid >= 0) {
                              auto& ga = t.grad_buf(aid);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bd)[i];
                          }
                          if (bid >= 0) {
                              auto& gb = t.grad_buf(bid);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*ad)[i];
                          }
                      });
}

inline Tensor add_scalar(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
    return detail::unary_op(x, x.shape(), std::move(out),
                            [](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                            });
}

inline Tensor mul_scalar(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    return detail::unary_op(x, x.shape(), std::move(out),
                            [s](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
                            });
}

/// m[:,j] + v for every column j. v is a rank-1 vector of length m.rows().
inline Tensor colwise_add(const Tensor& m, const Tensor& v) {
    detail::require_rank2(m, "colwise_add");
    if (v.rank() != 1 || v.size() != m.rows())
        throw ShapeError("colwise_add: vector " + shape_str(v.shape()) + " vs matrix " +
                         shape_str(m.shape()));
    const std::size_t r = m.rows(), c = m.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        const double vi = v[i];
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.data()[i * c + j] + vi;
    }
    Tape* tape = detail::result_tape({&m, &v});
    if (!tape) return Tensor({r, c}, std::move(out));
    const int mid = m.node(), vid = v.node();
    return tape->make({r, c}, std::move(out), detail::parent_ids({&m, &v}),
                      [r, c, mid, vid](const std::vector<double>& g, Tape& t) {
                          if (mid >= 0) {
                              auto& gm = t.grad_buf(mid);
                              for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
                          }
                          if (vid >= 0) {
                              auto& gv = t.grad_buf(vid);
                              for (std::size_t i = 0; i < r; ++i) {
                                  double s = 0.0;
                                  for (std::size_t j = 0; j < c; ++j) s += g[i * c + j];
                                  gv[i] += s;
                              }
                          }
                      });
}

/// m[:,j] * v elementwise for every column j.
inline Tensor colwise_mul(const Tensor& m, const Tensor& v) {
    detail::require_rank2(m, "colwise_mul");
    if (v.rank() != 1 || v.size() != m.rows())
        throw ShapeError("colwise_mul: vector " + shape_str(v.shape()) + " vs matrix " +
                         shape_str(m.shape()));
    const std::size_t r = m.rows(), c = m.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        const double vi = v[i];
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.data()[i * c + j] * vi;
    }
    Tape* tape = detail::result_tape({&m, &v});
    if (!tape) return Tensor({r, c}, std::move(out));
    auto md = detail::share(m);
    auto vd = detail::share(v);
    const int mid = m.node(), vid = v.node();
    return tape->make({r, c}, std::move(out), detail::parent_ids({&m, &v}),
                      [r, c, md, vd, mid, vid](const std::vector<double>& g, Tape& t) {
                          if (mid >= 0) {
                              auto& gm = t.grad_buf(mid);
                              for (std::size_t i = 0; i < r; ++i)
                                  for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += g[i * c + j] * (*vd)[i];
                          }
                          if (vid >= 0) {
                              auto& gv = t.grad_buf(vid);
                              for (std::size_t i = 0; i < r; ++i) {
                                  double s = 0.0;
                                  for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * (*md)[i * c + j];
                                  gv[i] += s;
                              }
                          }
                      });
}

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    auto xd = detail::share(x);
    return detail::unary_op(x, x.shape(), std::move(out),
                            [xd](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < g.size(); ++i)
                                    if ((*xd)[i] > 0.0) gx[i] += g[i];
                            });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    auto yd = std::make_shared<const std::vector<double>>(out);
    return detail::unary_op(x, x.shape(), std::move(out),
                            [yd](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                    const double y = (*yd)[i];
                                    gx[i] += g[i] * y * (1.0 - y);
                                }
                            });
}

/// log(1 + exp(x)) in its overflow-safe form.
inline Tensor softplus(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x[i];
        out[i] = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    }
    auto xd = detail::share(x);
    return detail::unary_op(x, x.shape(), std::move(out),
                            [xd](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                    const double v = (*xd)[i];
                                    const double s =
                                        v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                                    gx[i] += g[i] * s;
                                }
                            });
}

/// x^p for constant exponent p; inputs must be positive unless p is a
/// nonnegative integer.
inline Tensor pow_scalar(const Tensor& x, double p) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(x[i], p);
    auto xd = detail::share(x);
    return detail::unary_op(x, x.shape(), std::move(out),
                            [xd, p](const std::vector<double>& g, std::vector<double>& gx) {
                                if (p == 0.0) return;
                                for (std::size_t i = 0; i < g.size(); ++i)
                                    gx[i] += g[i] * p * std::pow((*xd)[i], p - 1.0);
                            });
}

inline Tensor abs(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(x[i]);
    auto xd = detail::share(x);
    return detail::unary_op(x, x.shape(), std::move(out),
                            [xd](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                    const double v = (*xd)[i];
                                    gx[i] += g[i] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
                                }
                            });
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
    const std::size_t n = x.size();
    return detail::unary_op(x, {1}, {s},
                            [n](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
                            });
}

inline Tensor mean(const Tensor& x) {
    if (x.empty()) throw ShapeError("mean: empty tensor");
    return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Numerically stabilized softmax along `axis` (0: each column sums to one,
/// 1: each row sums to one). Throws on non-finite input.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    detail::require_rank2(x, "softmax");
    if (axis > 1) throw ShapeError("softmax: axis must be 0 or 1");
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!std::isfinite(x[i])) throw Error("softmax: non-finite input");
    const std::size_t r = x.rows(), c = x.cols();
    // Slices run along `axis`; `nslices` independent normalizations.
    const std::size_t nslices = axis == 0 ? c : r;
    const std::size_t len = axis == 0 ? r : c;
    const std::size_t stride = axis == 0 ? c : 1;
    const std::size_t base_step = axis == 0 ? 1 : c;
    std::vector<double> out(x.size());
    const auto& xd = x.data();
    for (std::size_t s = 0; s < nslices; ++s) {
        const std::size_t base = s * base_step;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xd[base + i * stride]);
        double z = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            const double e = std::exp(xd[base + i * stride] - mx);
            out[base + i * stride] = e;
            z += e;
        }
        for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= z;
    }
    auto yd = std::make_shared<const std::vector<double>>(out);
    return detail::unary_op(
        x, x.shape(), std::move(out),
        [yd, nslices, len, stride, base_step](const std::vector<double>& g, std::vector<double>& gx) {
            for (std::size_t s = 0; s < nslices; ++s) {
                const std::size_t base = s * base_step;
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t k = base + i * stride;
                    dot += g[k] * (*yd)[k];
                }
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t k = base + i * stride;
                    gx[k] += (*yd)[k] * (g[k] - dot);
                }
            }
        });
}

/// Layer normalization over rows, independently per column: each column is
/// standardized then scaled/shifted by gain and bias (length = rows).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-6) {
    detail::require_rank2(x, "layer_norm");
    if (gain.size() != x.rows() || bias.size() != x.rows())
        throw ShapeError("layer_norm: gain/bias length must equal rows of " + shape_str(x.shape()));
    const std::size_t r = x.rows(), c = x.cols();
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_sigma(c);
    const auto& xd = x.data();
    for (std::size_t j = 0; j < c; ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < r; ++i) mu += xd[i * c + j];
        mu /= static_cast<double>(r);
        double var = 0.0;
        for (std::size_t i = 0; i < r; ++i) {
            const double d = xd[i * c + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(r);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[j] = is;
        for (std::size_t i = 0; i < r; ++i) {
            const double h = (xd[i * c + j] - mu) * is;
            xhat[i * c + j] = h;
            out[i * c + j] = gain[i] * h + bias[i];
        }
    }
    Tape* tape = detail::result_tape({&x, &gain, &bias});
    if (!tape) return Tensor({r, c}, std::move(out));
    auto xh = std::make_shared<const std::vector<double>>(std::move(xhat));
    auto isg = std::make_shared<const std::vector<double>>(std::move(inv_sigma));
    auto gd = detail::share(gain);
    const int xid = x.node(), gid = gain.node(), bid = bias.node();
    return tape->make(
        {r, c}, std::move(out), detail::parent_ids({&x, &gain, &bias}),
        [r, c, xh, isg, gd, xid, gid, bid](const std::vector<double>& g, Tape& t) {
            if (gid >= 0) {
                auto& gg = t.grad_buf(gid);
                for (std::size_t i = 0; i < r; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * (*xh)[i * c + j];
                    gg[i] += s;
                }
            }
            if (bid >= 0) {
                auto& gb = t.grad_buf(bid);
                for (std::size_t i = 0; i < r; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < c; ++j) s += g[i * c + j];
                    gb[i] += s;
                }
            }
            if (xid >= 0) {
                auto& gx = t.grad_buf(xid);
                for (std::size_t j = 0; j < c; ++j) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t i = 0; i < r; ++i) {
                        const double dh = g[i * c + j] * (*gd)[i];
                        mean_dh += dh;
                        mean_dh_h += dh * (*xh)[i * c + j];
                    }
                    mean_dh /= static_cast<double>(r);
                    mean_dh_h /= static_cast<double>(r);
                    for (std::size_t i = 0; i < r; ++i) {
                        const double dh = g[i * c + j] * (*gd)[i];
                        gx[i * c + j] += (*isg)[j] * (dh - mean_dh - (*xh)[i * c + j] * mean_dh_h);
                    }
                }
            }
        });
}

/// Vertical concatenation of rank-2 tensors with equal column counts.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t c = parts[0].cols();
    std::size_t r_total = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_rows");
        if (p.cols() != c) throw ShapeError("concat_rows: column counts differ");
        r_total += p.rows();
    }
    std::vector<double> out;
    out.reserve(r_total * c);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());

    Tape* tape = nullptr;
    for (const auto& p : parts) {
        if (!p.on_tape()) continue;
        if (tape && tape != p.tape()) throw Error("concat_rows: operands on different tapes");
        tape = p.tape();
    }
    if (!tape) return Tensor({r_total, c}, std::move(out));
    struct Piece {
        int id;
        std::size_t offset, count;
    };
    std::vector<Piece> pieces;
    std::vector<int> parents;
    std::size_t off = 0;
    for (const auto& p : parts) {
        if (p.on_tape()) {
            pieces.push_back({p.node(), off, p.size()});
            parents.push_back(p.node());
        }
        off += p.size();
    }
    return tape->make({r_total, c}, std::move(out), std::move(parents),
                      [pieces](const std::vector<double>& g, Tape& t) {
                          for (const auto& pc : pieces) {
                              auto& gp = t.grad_buf(pc.id);
                              for (std::size_t i = 0; i < pc.count; ++i) gp[i] += g[pc.offset + i];
                          }
                      });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) { return concat_rows(std::vector<Tensor>{a, b}); }

/// Rows [r0, r1) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    detail::require_rank2(x, "slice_rows");
    if (r0 > r1 || r1 > x.rows())
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") out of " + shape_str(x.shape()));
    const std::size_t c = x.cols();
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(r0 * c),
                            x.data().begin() + static_cast<std::ptrdiff_t>(r1 * c));
    const std::size_t off = r0 * c, cnt = (r1 - r0) * c;
    return detail::unary_op(x, {r1 - r0, c}, std::move(out),
                            [off, cnt](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < cnt; ++i) gx[off + i] += g[i];
                            });
}

/// Selects columns by index (duplicates allowed); backward scatters.
inline Tensor gather_cols(const Tensor& x, const std::vector<std::size_t>& idx) {
    detail::require_rank2(x, "gather_cols");
    const std::size_t r = x.rows(), c = x.cols();
    for (auto j : idx)
        if (j >= c) throw ShapeError("gather_cols: index " + std::to_string(j) + " out of " + shape_str(x.shape()));
    std::vector<double> out(r * idx.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t k = 0; k < idx.size(); ++k) out[i * idx.size() + k] = x.data()[i * c + idx[k]];
    const std::size_t nk = idx.size();
    return detail::unary_op(x, {r, nk}, std::move(out),
                            [r, c, idx, nk](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t k = 0; k < nk; ++k)
                                        gx[i * c + idx[k]] += g[i * nk + k];
                            });
}

/// Reinterprets the tensor with a new shape of identical element count.
inline Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
    if (Tensor::numel(shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(x.data());
    return detail::unary_op(x, std::move(shape), std::move(out),
                            [](const std::vector<double>& g, std::vector<double>& gx) {
                                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                            });
}

// ---------------------------------------------------------------------------
// Two-layer perceptron
// ---------------------------------------------------------------------------

enum class Activation { Relu, Identity };

/// linear -> nonlinearity -> linear, applied column-wise: forward() maps
/// [in x cols] to [out x cols]. The workhorse behind every embedding MLP.
struct Mlp2 {
    Tensor w1, b1, w2, b2;
    Activation act = Activation::Relu;

    static Mlp2 init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
                     Activation act = Activation::Relu) {
        auto layer = [&rng](std::size_t rows, std::size_t cols) {
            const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
            std::vector<double> d(rows * cols);
            for (auto& v : d) v = rng.uniform(-a, a);
            return Tensor({rows, cols}, std::move(d));
        };
        Mlp2 m;
        m.w1 = layer(hidden, in);
        m.b1 = Tensor::zeros({hidden});
        m.w2 = layer(out, hidden);
        m.b2 = Tensor::zeros({out});
        m.act = act;
        return m;
    }

    /// Xavier init with `pairs` hidden units arranged as +/- mirrors, so the
    /// network starts out computing an exact random rank-`pairs` linear map
    /// of its input (relu(rx) - relu(-rx) = rx). Useful where a useful
    /// signal must exist at step 0, e.g. coordinate embeddings whose dot
    /// products drive attention.
    static Mlp2 init_with_linear_path(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
                                      std::size_t pairs) {
        Mlp2 m = init(in, hidden, out, rng);
        if (2 * pairs > hidden) throw ConfigError("Mlp2: hidden width too small for linear path");
        std::vector<double> w1 = m.w1.data();
        std::vector<double> w2 = m.w2.data();
        const double r_scale = 1.0 / std::sqrt(static_cast<double>(in));
        const double u_scale = 1.0 / std::sqrt(static_cast<double>(pairs));
        for (std::size_t p = 0; p < pairs; ++p) {
            for (std::size_t j = 0; j < in; ++j) {
                const double r = rng.normal(0.0, r_scale);
                w1[(2 * p) * in + j] = r;
                w1[(2 * p + 1) * in + j] = -r;
            }
            for (std::size_t i = 0; i < out; ++i) {
                const double u = rng.normal(0.0, u_scale);
                w2[i * hidden + 2 * p] = u;
                w2[i * hidden + 2 * p + 1] = -u;
            }
        }
        m.w1 = m.w1.with_data(std::move(w1));
        m.w2 = m.w2.with_data(std::move(w2));
        return m;
    }

    std::size_t in_width() const { return w1.cols(); }
    std::size_t out_width() const { return w2.rows(); }

    Tensor forward(const Tensor& x) const {
        if (x.rows() != w1.cols())
            throw ShapeError("Mlp2: input width " + shape_str(x.shape()) + " vs weights " +
                             shape_str(w1.shape()));
        Tensor h = colwise_add(matmul(w1, x), b1);
        if (act == Activation::Relu) h = relu(h);
        return colwise_add(matmul(w2, h), b2);
    }

    template <class F>
    void visit(F&& f) {
        f("w1", w1);
        f("b1", b1);
        f("w2", w2);
        f("b2", b2);
    }
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

/// Checks the analytic gradient of a scalar-valued function against central
/// finite differences. `f` is called with a tape (or nullptr for plain
/// evaluation) and the parameter list; it must return a scalar tensor.
/// Returns max over coordinates of |analytic - fd| / max(1, |analytic|).
inline double grad_check(
    const std::function<Tensor(Tape*, const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& params, double eps = 1e-5) {
    Tape tape;
    std::vector<Tensor> attached;
    attached.reserve(params.size());
    for (const auto& p : params) attached.push_back(tape.leaf(p));
    Tensor loss = f(&tape, attached);
    if (loss.size() != 1) throw ShapeError("grad_check: f must return a scalar");
    tape.backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& a : attached) analytic.push_back(tape.grad(a));

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t i = 0; i < params[pi].size(); ++i) {
            auto eval_at = [&](double delta) {
                std::vector<Tensor> shifted = params;
                std::vector<double> d = params[pi].data();
                d[i] += delta;
                shifted[pi] = params[pi].with_data(std::move(d));
                return f(nullptr, shifted).item();
            };
            const double fd = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
            const double an = analytic[pi][i];
            const double err = std::abs(an - fd) / std::max(1.0, std::abs(an));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace cape
