#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "wg/autograd.hpp"
#include "wg/rng.hpp"
#include "wg/tensor.hpp"

namespace wg::nn {

using ag::Graph;
using ag::Param;
using ag::VarPtr;

using NamedParams = std::vector<std::pair<std::string, Param*>>;

struct Linear {
    Param W; // (out, in)
    Param b; // (out)

    Linear() = default;
    Linear(std::int64_t in, std::int64_t out, Rng& rng) {
        const double s = std::sqrt(2.0 / static_cast<double>(in + out));
        W = Param(Tensor::randn({out, in}, rng, s));
        b = Param(Tensor::zeros({out}));
    }

    std::int64_t in_dim() const { return W.value.dim(1); }
    std::int64_t out_dim() const { return W.value.dim(0); }

    /// x:(B,in) -> (B,out)
    VarPtr forward(Graph& g, VarPtr x) {
        auto wt = ag::transpose(g, g.leaf(W));
        return ag::add_row(g, ag::matmul(g, x, wt), g.leaf(b));
    }

    /// Inference path without a tape.
    Tensor apply(const Tensor& x) const {
        const auto m = x.dim(0), in = in_dim(), out = out_dim();
        Tensor y({m, out});
        y.mat(m, out).noalias() = x.mat(m, in) * W.value.mat(out, in).transpose();
        y.mat(m, out).rowwise() += b.value.vec().transpose();
        return y;
    }

    void collect(const std::string& prefix, NamedParams& out) {
        out.emplace_back(prefix + ".weight", &W);
        out.emplace_back(prefix + ".bias", &b);
    }
};

struct Conv2d {
    Param W; // (cout, cin, kh, kw)
    Param b; // (cout)
    std::int64_t stride = 1;
    std::int64_t pad = 0;

    Conv2d() = default;
    Conv2d(std::int64_t cin, std::int64_t cout, std::int64_t k, Rng& rng, std::int64_t stride_ = 1,
           std::int64_t pad_ = 0)
        : stride(stride_), pad(pad_) {
        const double s = std::sqrt(2.0 / static_cast<double>(cin * k * k + cout));
        W = Param(Tensor::randn({cout, cin, k, k}, rng, s));
        b = Param(Tensor::zeros({cout}));
    }

    VarPtr forward(Graph& g, VarPtr x) {
        return ag::conv2d(g, x, g.leaf(W), g.leaf(b), stride, pad);
    }

    Tensor apply(const Tensor& x) const {
        Graph g; // throwaway tape; inputs carry no grads so this is just forward math
        return ag::conv2d(g, g.input(x), g.input(W.value), g.input(b.value), stride, pad)->val;
    }

    void collect(const std::string& prefix, NamedParams& out) {
        out.emplace_back(prefix + ".weight", &W);
        out.emplace_back(prefix + ".bias", &b);
    }
};

struct GroupNorm {
    Param gamma;
    Param beta;
    std::int64_t groups = 1;

    GroupNorm() = default;
    GroupNorm(std::int64_t channels, std::int64_t groups_) : groups(groups_) {
        gamma = Param(Tensor::full({channels}, 1.0));
        beta = Param(Tensor::zeros({channels}));
    }

    VarPtr forward(Graph& g, VarPtr x) {
        return ag::group_norm(g, x, g.leaf(gamma), g.leaf(beta), groups);
    }

    void collect(const std::string& prefix, NamedParams& out) {
        out.emplace_back(prefix + ".gamma", &gamma);
        out.emplace_back(prefix + ".beta", &beta);
    }
};

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0; // decoupled (AdamW) when non-zero
};

class Adam {
public:
    Adam(std::vector<Param*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            m_.push_back(Tensor::zeros(p->value.shape()));
            v_.push_back(Tensor::zeros(p->value.shape()));
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i]->value.raw();
            const auto& gr = params_[i]->grad.raw();
            auto& m = m_[i].raw();
            auto& v = v_[i].raw();
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gr[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gr[j] * gr[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                if (cfg_.weight_decay > 0.0) p[j] -= cfg_.lr * cfg_.weight_decay * p[j];
                p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

private:
    std::vector<Param*> params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::int64_t t_ = 0;
};

/// Exponential moving average of parameters, applied at evaluation time.
class Ema {
public:
    Ema() = default;
    Ema(const std::vector<Param*>& params, double decay) : decay_(decay) {
        for (auto* p : params) shadow_.push_back(p->value.clone());
    }

    void update(const std::vector<Param*>& params) {
        for (std::size_t i = 0; i < params.size(); ++i)
            shadow_[i].vec() = decay_ * shadow_[i].vec() + (1.0 - decay_) * params[i]->value.vec();
    }

    /// Swap EMA weights in; returns the originals so the caller can restore.
    std::vector<Tensor> swap_in(const std::vector<Param*>& params) {
        std::vector<Tensor> orig;
        orig.reserve(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            orig.push_back(params[i]->value.clone());
            params[i]->value.vec() = shadow_[i].vec();
        }
        return orig;
    }

    static void restore(const std::vector<Param*>& params, const std::vector<Tensor>& orig) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value.vec() = orig[i].vec();
    }

    std::vector<Tensor>& shadow() { return shadow_; }
    const std::vector<Tensor>& shadow() const { return shadow_; }
    double decay() const { return decay_; }

private:
    double decay_ = 0.999;
    std::vector<Tensor> shadow_;
};

inline std::vector<Param*> param_ptrs(const NamedParams& named) {
    std::vector<Param*> out;
    out.reserve(named.size());
    for (const auto& [name, p] : named) out.push_back(p);
    return out;
}

/// Sinusoidal timestep embedding rows for a batch of integer steps.
inline Tensor timestep_embedding(const std::vector<std::int64_t>& ts, std::int64_t dim) {
    const std::int64_t half = dim / 2;
    Tensor out({static_cast<std::int64_t>(ts.size()), dim});
    auto m = out.mat(static_cast<std::int64_t>(ts.size()), dim);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        for (std::int64_t j = 0; j < half; ++j) {
            const double freq =
                std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
            const double v = static_cast<double>(ts[i]) * freq;
            m(static_cast<std::int64_t>(i), j) = std::sin(v);
            m(static_cast<std::int64_t>(i), half + j) = std::cos(v);
        }
        if (dim % 2) m(static_cast<std::int64_t>(i), dim - 1) = 0.0;
    }
    return out;
}

} // namespace wg::nn
