#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "wg/tensor.hpp"

namespace wg::ag {

/// Trainable parameter: value plus gradient accumulator.
struct Param {
    Tensor value;
    Tensor grad;

    Param() = default;
    explicit Param(Tensor v) : value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

    void zero_grad() { grad.fill(0.0); }
};

struct Node;
using VarPtr = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;            // allocated lazily
    bool requires_grad = false;
    Param* bound = nullptr; // leaf nodes write grads back to their Param
    std::vector<VarPtr> parents;
    std::function<void(Node&)> backprop;

    Tensor& ensure_grad() {
        if (!grad.defined()) grad = Tensor::zeros(val.shape());
        return grad;
    }
};

/// Single-step computation tape. Create one per forward/backward pass;
/// leaves bound to the same Param are memoized so shared modules
/// accumulate gradients correctly.
class Graph {
public:
    VarPtr leaf(Param& p) {
        auto it = leaves_.find(&p);
        if (it != leaves_.end()) return it->second;
        auto n = std::make_shared<Node>();
        n->val = p.value;
        n->requires_grad = true;
        n->bound = &p;
        nodes_.push_back(n);
        leaves_.emplace(&p, n);
        return n;
    }

    VarPtr input(Tensor v) {
        auto n = std::make_shared<Node>();
        n->val = std::move(v);
        nodes_.push_back(n);
        return n;
    }

    VarPtr make(Tensor v, std::vector<VarPtr> parents, std::function<void(Node&)> back) {
        auto n = std::make_shared<Node>();
        n->val = std::move(v);
        for (const auto& p : parents) n->requires_grad |= p->requires_grad;
        if (n->requires_grad) {
            n->parents = std::move(parents);
            n->backprop = std::move(back);
        }
        nodes_.push_back(n);
        return n;
    }

    /// Reverse pass from a scalar root. Gradients land in each bound Param.
    void backward(const VarPtr& root) {
        if (root->val.size() != 1)
            throw std::invalid_argument("backward: root must be scalar");
        root->ensure_grad()[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& n = **it;
            if (n.requires_grad && n.backprop && n.grad.defined()) n.backprop(n);
        }
        for (auto& [param, node] : leaves_) {
            if (node->grad.defined())
                param->grad.vec() += node->grad.vec();
        }
    }

private:
    std::vector<VarPtr> nodes_;
    std::map<Param*, VarPtr> leaves_;
};

inline void check_same_shape(const VarPtr& a, const VarPtr& b, const char* op) {
    if (!a->val.same_shape(b->val))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a->val.shape()) + " vs " + shape_str(b->val.shape()));
}

// ---------------------------------------------------------------------------
// elementwise and arithmetic
// ---------------------------------------------------------------------------

inline VarPtr add(Graph& g, VarPtr a, VarPtr b) {
    check_same_shape(a, b, "add");
    Tensor out = a->val.clone();
    out.vec() += b->val.vec();
    return g.make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec();
        if (b->requires_grad) b->ensure_grad().vec() += n.grad.vec();
    });
}

inline VarPtr sub(Graph& g, VarPtr a, VarPtr b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->val.clone();
    out.vec() -= b->val.vec();
    return g.make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec();
        if (b->requires_grad) b->ensure_grad().vec() -= n.grad.vec();
    });
}

inline VarPtr mul(Graph& g, VarPtr a, VarPtr b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->val.clone();
    out.vec().array() *= b->val.vec().array();
    return g.make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad)
            a->ensure_grad().vec().array() += n.grad.vec().array() * b->val.vec().array();
        if (b->requires_grad)
            b->ensure_grad().vec().array() += n.grad.vec().array() * a->val.vec().array();
    });
}

inline VarPtr scale(Graph& g, VarPtr a, double c) {
    Tensor out = a->val.clone();
    out.vec() *= c;
    return g.make(std::move(out), {a}, [a, c](Node& n) {
        if (a->requires_grad) a->ensure_grad().vec() += c * n.grad.vec();
    });
}

inline VarPtr add_scalar(Graph& g, VarPtr a, double c) {
    Tensor out = a->val.clone();
    out.vec().array() += c;
    return g.make(std::move(out), {a}, [a](Node& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec();
    });
}

namespace detail {
template <typename F, typename DF>
VarPtr unary(Graph& g, VarPtr a, F f, DF dfdx) {
    Tensor out = a->val.clone();
    for (auto& x : out.raw()) x = f(x);
    return g.make(std::move(out), {a}, [a, dfdx](Node& n) {
        if (!a->requires_grad) return;
        auto& ga = a->ensure_grad();
        const auto& x = a->val.raw();
        const auto& go = n.grad.raw();
        auto& gr = ga.raw();
        for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += go[i] * dfdx(x[i]);
    });
}
} // namespace detail

inline VarPtr relu(Graph& g, VarPtr a) {
    return detail::unary(
        g, a, [](double x) { return x > 0 ? x : 0.0; },
        [](double x) { return x > 0 ? 1.0 : 0.0; });
}

inline VarPtr leaky_relu(Graph& g, VarPtr a, double slope = 0.01) {
    return detail::unary(
        g, a, [slope](double x) { return x > 0 ? x : slope * x; },
        [slope](double x) { return x > 0 ? 1.0 : slope; });
}

inline VarPtr silu(Graph& g, VarPtr a) {
    return detail::unary(
        g, a,
        [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

inline VarPtr sigmoid(Graph& g, VarPtr a) {
    return detail::unary(
        g, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double x) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 - s);
        });
}

inline VarPtr tanh_op(Graph& g, VarPtr a) {
    return detail::unary(
        g, a, [](double x) { return std::tanh(x); },
        [](double x) {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        });
}

inline VarPtr exp_op(Graph& g, VarPtr a) {
    return detail::unary(
        g, a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

inline VarPtr square(Graph& g, VarPtr a) {
    return detail::unary(
        g, a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
inline VarPtr matmul(Graph& g, VarPtr a, VarPtr b) {
    if (a->val.ndim() != 2 || b->val.ndim() != 2 || a->val.dim(1) != b->val.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " +
                                    shape_str(a->val.shape()) + " x " + shape_str(b->val.shape()));
    const auto m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
    Tensor out({m, n});
    out.mat(m, n).noalias() = a->val.mat(m, k) * b->val.mat(k, n);
    return g.make(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
        auto go = nd.grad.mat(m, n);
        if (a->requires_grad)
            a->ensure_grad().mat(m, k).noalias() += go * b->val.mat(k, n).transpose();
        if (b->requires_grad)
            b->ensure_grad().mat(k, n).noalias() += a->val.mat(m, k).transpose() * go;
    });
}

/// A[m,n] + row b[n] broadcast over rows.
inline VarPtr add_row(Graph& g, VarPtr a, VarPtr b) {
    if (a->val.ndim() != 2 || b->val.size() != a->val.dim(1))
        throw std::invalid_argument("add_row: shape mismatch");
    const auto m = a->val.dim(0), n = a->val.dim(1);
    Tensor out = a->val.clone();
    out.mat(m, n).rowwise() += b->val.vec().transpose();
    return g.make(std::move(out), {a, b}, [a, b, m, n](Node& nd) {
        if (a->requires_grad) a->ensure_grad().vec() += nd.grad.vec();
        if (b->requires_grad)
            b->ensure_grad().vec() += nd.grad.mat(m, n).colwise().sum().transpose();
    });
}

inline VarPtr transpose(Graph& g, VarPtr a) {
    if (a->val.ndim() != 2) throw std::invalid_argument("transpose: need 2-D");
    const auto m = a->val.dim(0), n = a->val.dim(1);
    Tensor out({n, m});
    out.mat(n, m) = a->val.mat(m, n).transpose();
    return g.make(std::move(out), {a}, [a, m, n](Node& nd) {
        if (a->requires_grad) a->ensure_grad().mat(m, n) += nd.grad.mat(n, m).transpose();
    });
}

inline VarPtr reshape(Graph& g, VarPtr a, std::vector<std::int64_t> shape) {
    Tensor out = a->val.clone().reshaped(std::move(shape));
    return g.make(std::move(out), {a}, [a](Node& nd) {
        if (a->requires_grad) a->ensure_grad().vec() += nd.grad.vec();
    });
}

/// Select rows of a 2-D table: out[i,:] = table[idx[i],:]. Used for learned
/// index-embedding lookups.
inline VarPtr gather_rows(Graph& g, VarPtr table, std::vector<std::int64_t> idx) {
    if (table->val.ndim() != 2) throw std::invalid_argument("gather_rows: need 2-D table");
    const auto rows = table->val.dim(0), cols = table->val.dim(1);
    for (auto i : idx)
        if (i < 0 || i >= rows) throw std::out_of_range("gather_rows: index out of range");
    const auto m = static_cast<std::int64_t>(idx.size());
    Tensor out({m, cols});
    auto src = table->val.mat(rows, cols);
    auto dst = out.mat(m, cols);
    for (std::int64_t i = 0; i < m; ++i) dst.row(i) = src.row(idx[i]);
    return g.make(std::move(out), {table}, [table, idx = std::move(idx), rows, cols, m](Node& nd) {
        if (!table->requires_grad) return;
        auto gt = table->ensure_grad().mat(rows, cols);
        auto go = nd.grad.mat(m, cols);
        for (std::int64_t i = 0; i < m; ++i) gt.row(idx[i]) += go.row(i);
    });
}

/// Concatenate two 2-D tensors along columns.
inline VarPtr concat_cols(Graph& g, VarPtr a, VarPtr b) {
    if (a->val.ndim() != 2 || b->val.ndim() != 2 || a->val.dim(0) != b->val.dim(0))
        throw std::invalid_argument("concat_cols: shape mismatch");
    const auto m = a->val.dim(0), na = a->val.dim(1), nb = b->val.dim(1);
    Tensor out({m, na + nb});
    out.mat(m, na + nb).leftCols(na) = a->val.mat(m, na);
    out.mat(m, na + nb).rightCols(nb) = b->val.mat(m, nb);
    return g.make(std::move(out), {a, b}, [a, b, m, na, nb](Node& nd) {
        auto go = nd.grad.mat(m, na + nb);
        if (a->requires_grad) a->ensure_grad().mat(m, na) += go.leftCols(na);
        if (b->requires_grad) b->ensure_grad().mat(m, nb) += go.rightCols(nb);
    });
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

inline VarPtr sum(Graph& g, VarPtr a) {
    Tensor out = Tensor::scalar(a->val.vec().sum());
    return g.make(std::move(out), {a}, [a](Node& nd) {
        if (a->requires_grad) a->ensure_grad().vec().array() += nd.grad[0];
    });
}

inline VarPtr mean(Graph& g, VarPtr a) {
    const double inv = 1.0 / static_cast<double>(a->val.size());
    Tensor out = Tensor::scalar(a->val.vec().sum() * inv);
    return g.make(std::move(out), {a}, [a, inv](Node& nd) {
        if (a->requires_grad) a->ensure_grad().vec().array() += nd.grad[0] * inv;
    });
}

/// Mean over rows of a 2-D tensor -> (1, n).
inline VarPtr mean_rows(Graph& g, VarPtr a) {
    if (a->val.ndim() != 2) throw std::invalid_argument("mean_rows: need 2-D");
    const auto m = a->val.dim(0), n = a->val.dim(1);
    Tensor out({1, n});
    out.mat(1, n) = a->val.mat(m, n).colwise().mean();
    return g.make(std::move(out), {a}, [a, m, n](Node& nd) {
        if (!a->requires_grad) return;
        const double inv = 1.0 / static_cast<double>(m);
        a->ensure_grad().mat(m, n).rowwise() += inv * nd.grad.mat(1, n).row(0);
    });
}

/// Mean squared error against a constant target, averaged over all elements.
inline VarPtr mse(Graph& g, VarPtr a, const Tensor& target) {
    if (!a->val.same_shape(target)) throw std::invalid_argument("mse: shape mismatch");
    const double inv = 1.0 / static_cast<double>(a->val.size());
    double acc = 0.0;
    const auto& x = a->val.raw();
    const auto& t = target.raw();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - t[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc * inv);
    return g.make(std::move(out), {a}, [a, target, inv](Node& nd) {
        if (!a->requires_grad) return;
        auto& gr = a->ensure_grad().raw();
        const auto& x = a->val.raw();
        const auto& t = target.raw();
        const double c = 2.0 * inv * nd.grad[0];
        for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += c * (x[i] - t[i]);
    });
}

/// Row-wise softmax of a 2-D tensor.
inline VarPtr softmax_rows(Graph& g, VarPtr a) {
    if (a->val.ndim() != 2) throw std::invalid_argument("softmax_rows: need 2-D");
    const auto m = a->val.dim(0), n = a->val.dim(1);
    Tensor out = a->val.clone();
    auto s = out.mat(m, n);
    for (std::int64_t i = 0; i < m; ++i) {
        const double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
    }
    return g.make(std::move(out), {a}, [a, m, n](Node& nd) {
        if (!a->requires_grad) return;
        auto ga = a->ensure_grad().mat(m, n);
        auto s = nd.val.mat(m, n);
        auto go = nd.grad.mat(m, n);
        for (std::int64_t i = 0; i < m; ++i) {
            const double dot = (go.row(i).array() * s.row(i).array()).sum();
            ga.row(i).array() += (go.row(i).array() - dot) * s.row(i).array();
        }
    });
}

/// Mean softmax cross entropy of logits[m,C] against integer labels.
inline VarPtr softmax_xent(Graph& g, VarPtr logits, const std::vector<std::int64_t>& labels) {
    if (logits->val.ndim() != 2 || static_cast<std::int64_t>(labels.size()) != logits->val.dim(0))
        throw std::invalid_argument("softmax_xent: shape mismatch");
    const auto m = logits->val.dim(0), c = logits->val.dim(1);
    Tensor probs({m, c});
    auto lg = logits->val.mat(m, c);
    auto pr = probs.mat(m, c);
    double loss = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        const double mx = lg.row(i).maxCoeff();
        pr.row(i) = (lg.row(i).array() - mx).exp();
        const double z = pr.row(i).sum();
        pr.row(i) /= z;
        loss -= std::log(std::max(pr(i, labels[i]), 1e-300));
    }
    loss /= static_cast<double>(m);
    return g.make(Tensor::scalar(loss), {logits}, [logits, probs, labels, m, c](Node& nd) {
        if (!logits->requires_grad) return;
        auto gl = logits->ensure_grad().mat(m, c);
        auto pr = probs.mat(m, c);
        const double w = nd.grad[0] / static_cast<double>(m);
        for (std::int64_t i = 0; i < m; ++i) {
            gl.row(i) += w * pr.row(i);
            gl(i, labels[i]) -= w;
        }
    });
}

/// Mean InfoNCE loss over rows of a square similarity matrix: row i's
/// positive is column i. Returns mean_i( logsumexp(sim_i) - sim_ii ).
inline VarPtr infonce_rows(Graph& g, VarPtr sim) {
    if (sim->val.ndim() != 2 || sim->val.dim(0) != sim->val.dim(1))
        throw std::invalid_argument("infonce_rows: need square matrix");
    const auto n = sim->val.dim(0);
    Tensor probs({n, n});
    auto s = sim->val.mat(n, n);
    auto pr = probs.mat(n, n);
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double mx = s.row(i).maxCoeff();
        pr.row(i) = (s.row(i).array() - mx).exp();
        const double z = pr.row(i).sum();
        pr.row(i) /= z;
        loss += std::log(z) + mx - s(i, i);
    }
    loss /= static_cast<double>(n);
    return g.make(Tensor::scalar(loss), {sim}, [sim, probs, n](Node& nd) {
        if (!sim->requires_grad) return;
        auto gs = sim->ensure_grad().mat(n, n);
        auto pr = probs.mat(n, n);
        const double w = nd.grad[0] / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) {
            gs.row(i) += w * pr.row(i);
            gs(i, i) -= w;
        }
    });
}

/// Row-wise L2 normalization: y_i = x_i / max(||x_i||, eps).
inline VarPtr l2_normalize_rows(Graph& g, VarPtr a, double eps = 1e-12) {
    if (a->val.ndim() != 2) throw std::invalid_argument("l2_normalize_rows: need 2-D");
    const auto m = a->val.dim(0), n = a->val.dim(1);
    Tensor out = a->val.clone();
    std::vector<double> norms(static_cast<std::size_t>(m));
    auto y = out.mat(m, n);
    for (std::int64_t i = 0; i < m; ++i) {
        const double nr = std::max(y.row(i).norm(), eps);
        norms[static_cast<std::size_t>(i)] = nr;
        y.row(i) /= nr;
    }
    return g.make(std::move(out), {a}, [a, norms = std::move(norms), m, n](Node& nd) {
        if (!a->requires_grad) return;
        auto ga = a->ensure_grad().mat(m, n);
        auto y = nd.val.mat(m, n);
        auto go = nd.grad.mat(m, n);
        for (std::int64_t i = 0; i < m; ++i) {
            const double dot = go.row(i).dot(y.row(i));
            ga.row(i) += (go.row(i) - dot * y.row(i)) / norms[static_cast<std::size_t>(i)];
        }
    });
}

// ---------------------------------------------------------------------------
// image ops (N,C,H,W)
// ---------------------------------------------------------------------------

namespace detail {
inline void conv_shape(const std::vector<std::int64_t>& x, const std::vector<std::int64_t>& w,
                       std::int64_t stride, std::int64_t pad, std::int64_t& ho, std::int64_t& wo) {
    if (x.size() != 4 || w.size() != 4 || x[1] != w[1])
        throw std::invalid_argument("conv2d: bad shapes");
    ho = (x[2] + 2 * pad - w[2]) / stride + 1;
    wo = (x[3] + 2 * pad - w[3]) / stride + 1;
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");
}

/// im2col: X(N,C,H,W) -> (N*Ho*Wo, C*kh*kw), row-major patches.
inline Tensor im2col(const Tensor& x, std::int64_t kh, std::int64_t kw, std::int64_t stride,
                     std::int64_t pad, std::int64_t ho, std::int64_t wo) {
    const auto nB = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor col({nB * ho * wo, c * kh * kw});
    double* dst = col.data();
    const double* src = x.data();
    for (std::int64_t b = 0; b < nB; ++b)
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const double* plane = src + (b * c + ch) * h * w;
                    for (std::int64_t ky = 0; ky < kh; ++ky) {
                        const std::int64_t iy = oy * stride - pad + ky;
                        for (std::int64_t kx = 0; kx < kw; ++kx) {
                            const std::int64_t ix = ox * stride - pad + kx;
                            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                         ? plane[iy * w + ix]
                                         : 0.0;
                        }
                    }
                }
            }
    return col;
}

/// Scatter-add of column gradients back into image layout.
inline void col2im(const Tensor& col, Tensor& dx, std::int64_t kh, std::int64_t kw,
                   std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo) {
    const auto nB = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
    const double* src = col.data();
    double* dst = dx.data();
    for (std::int64_t b = 0; b < nB; ++b)
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    double* plane = dst + (b * c + ch) * h * w;
                    for (std::int64_t ky = 0; ky < kh; ++ky) {
                        const std::int64_t iy = oy * stride - pad + ky;
                        for (std::int64_t kx = 0; kx < kw; ++kx) {
                            const std::int64_t ix = ox * stride - pad + kx;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                plane[iy * w + ix] += *src;
                            ++src;
                        }
                    }
                }
            }
}
} // namespace detail

/// 2-D convolution. x:(N,Cin,H,W), w:(Cout,Cin,kh,kw), b:(Cout).
inline VarPtr conv2d(Graph& g, VarPtr x, VarPtr w, VarPtr b, std::int64_t stride = 1,
                     std::int64_t pad = 0) {
    std::int64_t ho, wo;
    detail::conv_shape(x->val.shape(), w->val.shape(), stride, pad, ho, wo);
    const auto nB = x->val.dim(0), cout = w->val.dim(0);
    const auto kh = w->val.dim(2), kw = w->val.dim(3);
    const auto k = w->val.dim(1) * kh * kw;
    if (b->val.size() != cout) throw std::invalid_argument("conv2d: bad bias");

    Tensor col = detail::im2col(x->val, kh, kw, stride, pad, ho, wo);
    // (N*Ho*Wo, K) x (K, Cout) -> (N*Ho*Wo, Cout); output wants (N,Cout,Ho,Wo)
    MatX y = col.mat(nB * ho * wo, k) * w->val.mat(cout, k).transpose();
    y.rowwise() += b->val.vec().transpose();
    Tensor out({nB, cout, ho, wo});
    for (std::int64_t bn = 0; bn < nB; ++bn) {
        auto block = y.middleRows(bn * ho * wo, ho * wo); // (Ho*Wo, Cout)
        MatMap(out.data() + bn * cout * ho * wo, cout, ho * wo) = block.transpose();
    }

    return g.make(std::move(out), {x, w, b},
                  [x, w, b, col, nB, cout, ho, wo, k, kh, kw, stride, pad](Node& nd) {
        // regroup output grad to (N*Ho*Wo, Cout)
        MatX gy(nB * ho * wo, cout);
        for (std::int64_t bn = 0; bn < nB; ++bn)
            gy.middleRows(bn * ho * wo, ho * wo) =
                ConstMatMap(nd.grad.data() + bn * cout * ho * wo, cout, ho * wo).transpose();
        if (b->requires_grad)
            b->ensure_grad().vec() += gy.colwise().sum().transpose();
        if (w->requires_grad)
            w->ensure_grad().mat(cout, k).noalias() += gy.transpose() * col.mat(nB * ho * wo, k);
        if (x->requires_grad) {
            Tensor gcol({nB * ho * wo, k});
            gcol.mat(nB * ho * wo, k).noalias() = gy * w->val.mat(cout, k);
            detail::col2im(gcol, x->ensure_grad(), kh, kw, stride, pad, ho, wo);
        }
    });
}

/// 2x2 average pooling, stride 2 (H and W must be even).
inline VarPtr avg_pool2(Graph& g, VarPtr x) {
    const auto& s = x->val.shape();
    if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw std::invalid_argument("avg_pool2: bad shape");
    const auto nB = s[0], c = s[1], h = s[2], w = s[3];
    Tensor out({nB, c, h / 2, w / 2});
    const double* src = x->val.data();
    double* dst = out.data();
    for (std::int64_t p = 0; p < nB * c; ++p) {
        const double* pl = src + p * h * w;
        for (std::int64_t y = 0; y < h / 2; ++y)
            for (std::int64_t xx = 0; xx < w / 2; ++xx)
                *dst++ = 0.25 * (pl[2 * y * w + 2 * xx] + pl[2 * y * w + 2 * xx + 1] +
                                 pl[(2 * y + 1) * w + 2 * xx] + pl[(2 * y + 1) * w + 2 * xx + 1]);
    }
    return g.make(std::move(out), {x}, [x, nB, c, h, w](Node& nd) {
        if (!x->requires_grad) return;
        double* gx = x->ensure_grad().data();
        const double* go = nd.grad.data();
        for (std::int64_t p = 0; p < nB * c; ++p) {
            double* pl = gx + p * h * w;
            for (std::int64_t y = 0; y < h / 2; ++y)
                for (std::int64_t xx = 0; xx < w / 2; ++xx) {
                    const double v = 0.25 * (*go++);
                    pl[2 * y * w + 2 * xx] += v;
                    pl[2 * y * w + 2 * xx + 1] += v;
                    pl[(2 * y + 1) * w + 2 * xx] += v;
                    pl[(2 * y + 1) * w + 2 * xx + 1] += v;
                }
        }
    });
}

/// Nearest-neighbor 2x upsampling.
inline VarPtr upsample2(Graph& g, VarPtr x) {
    const auto& s = x->val.shape();
    if (s.size() != 4) throw std::invalid_argument("upsample2: bad shape");
    const auto nB = s[0], c = s[1], h = s[2], w = s[3];
    Tensor out({nB, c, h * 2, w * 2});
    const double* src = x->val.data();
    double* dst = out.data();
    for (std::int64_t p = 0; p < nB * c; ++p) {
        const double* pl = src + p * h * w;
        double* ol = dst + p * h * w * 4;
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t xx = 0; xx < w; ++xx) {
                const double v = pl[y * w + xx];
                ol[(2 * y) * 2 * w + 2 * xx] = v;
                ol[(2 * y) * 2 * w + 2 * xx + 1] = v;
                ol[(2 * y + 1) * 2 * w + 2 * xx] = v;
                ol[(2 * y + 1) * 2 * w + 2 * xx + 1] = v;
            }
    }
    return g.make(std::move(out), {x}, [x, nB, c, h, w](Node& nd) {
        if (!x->requires_grad) return;
        double* gx = x->ensure_grad().data();
        const double* go = nd.grad.data();
        for (std::int64_t p = 0; p < nB * c; ++p) {
            double* pl = gx + p * h * w;
            const double* ol = go + p * h * w * 4;
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t xx = 0; xx < w; ++xx)
                    pl[y * w + xx] += ol[(2 * y) * 2 * w + 2 * xx] +
                                      ol[(2 * y) * 2 * w + 2 * xx + 1] +
                                      ol[(2 * y + 1) * 2 * w + 2 * xx] +
                                      ol[(2 * y + 1) * 2 * w + 2 * xx + 1];
        }
    });
}

/// Concatenate along the channel axis of (N,C,H,W).
inline VarPtr concat_channels(Graph& g, VarPtr a, VarPtr b) {
    const auto& sa = a->val.shape();
    const auto& sb = b->val.shape();
    if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        throw std::invalid_argument("concat_channels: shape mismatch");
    const auto nB = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
    Tensor out({nB, ca + cb, sa[2], sa[3]});
    for (std::int64_t bn = 0; bn < nB; ++bn) {
        std::copy_n(a->val.data() + bn * ca * hw, ca * hw, out.data() + bn * (ca + cb) * hw);
        std::copy_n(b->val.data() + bn * cb * hw, cb * hw,
                    out.data() + bn * (ca + cb) * hw + ca * hw);
    }
    return g.make(std::move(out), {a, b}, [a, b, nB, ca, cb, hw](Node& nd) {
        for (std::int64_t bn = 0; bn < nB; ++bn) {
            const double* go = nd.grad.data() + bn * (ca + cb) * hw;
            if (a->requires_grad) {
                double* ga = a->ensure_grad().data() + bn * ca * hw;
                for (std::int64_t i = 0; i < ca * hw; ++i) ga[i] += go[i];
            }
            if (b->requires_grad) {
                double* gb = b->ensure_grad().data() + bn * cb * hw;
                for (std::int64_t i = 0; i < cb * hw; ++i) gb[i] += go[ca * hw + i];
            }
        }
    });
}

/// x(N,C,H,W) + s(N,C) broadcast over spatial dims (timestep conditioning).
inline VarPtr add_channel_bias(Graph& g, VarPtr x, VarPtr s) {
    const auto& sx = x->val.shape();
    if (sx.size() != 4 || s->val.ndim() != 2 || s->val.dim(0) != sx[0] || s->val.dim(1) != sx[1])
        throw std::invalid_argument("add_channel_bias: shape mismatch");
    const auto nB = sx[0], c = sx[1], hw = sx[2] * sx[3];
    Tensor out = x->val.clone();
    double* dst = out.data();
    const double* bias = s->val.data();
    for (std::int64_t p = 0; p < nB * c; ++p) {
        const double v = bias[p];
        for (std::int64_t i = 0; i < hw; ++i) dst[p * hw + i] += v;
    }
    return g.make(std::move(out), {x, s}, [x, s, nB, c, hw](Node& nd) {
        if (x->requires_grad) x->ensure_grad().vec() += nd.grad.vec();
        if (s->requires_grad) {
            double* gs = s->ensure_grad().data();
            const double* go = nd.grad.data();
            for (std::int64_t p = 0; p < nB * c; ++p) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < hw; ++i) acc += go[p * hw + i];
                gs[p] += acc;
            }
        }
    });
}

/// Group normalization over (N,C,H,W) with per-channel affine parameters.
inline VarPtr group_norm(Graph& g, VarPtr x, VarPtr gamma, VarPtr beta, std::int64_t groups,
                         double eps = 1e-5) {
    const auto& s = x->val.shape();
    if (s.size() != 4 || s[1] % groups) throw std::invalid_argument("group_norm: bad shape");
    if (gamma->val.size() != s[1] || beta->val.size() != s[1])
        throw std::invalid_argument("group_norm: bad affine params");
    const auto nB = s[0], c = s[1], hw = s[2] * s[3];
    const auto cg = c / groups;        // channels per group
    const auto m = cg * hw;            // elements per (sample, group)

    Tensor xhat({nB, c, s[2], s[3]});
    Tensor out({nB, c, s[2], s[3]});
    std::vector<double> inv_std(static_cast<std::size_t>(nB * groups));
    const double* px = x->val.data();
    double* ph = xhat.data();
    double* po = out.data();
    const double* gm = gamma->val.data();
    const double* bt = beta->val.data();
    for (std::int64_t bn = 0; bn < nB; ++bn)
        for (std::int64_t gr = 0; gr < groups; ++gr) {
            const std::int64_t base = (bn * c + gr * cg) * hw;
            double mu = 0.0;
            for (std::int64_t i = 0; i < m; ++i) mu += px[base + i];
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (std::int64_t i = 0; i < m; ++i) {
                const double d = px[base + i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(bn * groups + gr)] = is;
            for (std::int64_t ch = 0; ch < cg; ++ch) {
                const double gmc = gm[gr * cg + ch], btc = bt[gr * cg + ch];
                for (std::int64_t i = 0; i < hw; ++i) {
                    const std::int64_t k = base + ch * hw + i;
                    ph[k] = (px[k] - mu) * is;
                    po[k] = gmc * ph[k] + btc;
                }
            }
        }

    return g.make(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat, inv_std = std::move(inv_std), nB, c, hw, cg, groups,
                   m](Node& nd) {
        const double* ph = xhat.data();
        const double* go = nd.grad.data();
        const double* gm = gamma->val.data();
        if (gamma->requires_grad || beta->requires_grad) {
            double* ggm = gamma->requires_grad ? gamma->ensure_grad().data() : nullptr;
            double* gbt = beta->requires_grad ? beta->ensure_grad().data() : nullptr;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                double ag = 0.0, ab = 0.0;
                for (std::int64_t bn = 0; bn < nB; ++bn) {
                    const std::int64_t base = (bn * c + ch) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        ag += go[base + i] * ph[base + i];
                        ab += go[base + i];
                    }
                }
                if (ggm) ggm[ch] += ag;
                if (gbt) gbt[ch] += ab;
            }
        }
        if (!x->requires_grad) return;
        double* gx = x->ensure_grad().data();
        for (std::int64_t bn = 0; bn < nB; ++bn)
            for (std::int64_t gr = 0; gr < groups; ++gr) {
                const std::int64_t base = (bn * c + gr * cg) * hw;
                const double is = inv_std[static_cast<std::size_t>(bn * groups + gr)];
                // dxhat = go * gamma ; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                double s1 = 0.0, s2 = 0.0;
                for (std::int64_t ch = 0; ch < cg; ++ch) {
                    const double gmc = gm[gr * cg + ch];
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const std::int64_t k = base + ch * hw + i;
                        const double dxh = go[k] * gmc;
                        s1 += dxh;
                        s2 += dxh * ph[k];
                    }
                }
                s1 /= static_cast<double>(m);
                s2 /= static_cast<double>(m);
                for (std::int64_t ch = 0; ch < cg; ++ch) {
                    const double gmc = gm[gr * cg + ch];
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const std::int64_t k = base + ch * hw + i;
                        gx[k] += is * (go[k] * gmc - s1 - ph[k] * s2);
                    }
                }
            }
    });
}

} // namespace wg::ag
