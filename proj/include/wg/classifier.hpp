#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "wg/codec.hpp"
#include "wg/data.hpp"
#include "wg/nn.hpp"

namespace wg::cls {

using ag::Graph;
using ag::VarPtr;

/// Desk-scale target architectures whose weights populate the zoo:
///  - "mlp_head": two-layer MLP over features (leaky ReLU), the classifier
///    head profile used for feature-based datasets.
///  - "tiny_convnet": 2 conv + pool stages and a linear readout over raw
///    images.
struct ClassifierConfig {
    std::string arch = "mlp_head";
    std::int64_t input_dim = 0; // mlp: feature dim; convnet: channels*h*w
    std::int64_t hidden = 128;
    std::int64_t classes = 0;
    // convnet only
    std::int64_t channels = 1, height = 8, width = 8;
    std::int64_t conv1 = 4, conv2 = 6;
};

class Classifier {
public:
    explicit Classifier(const ClassifierConfig& cfg, std::uint64_t init_seed = 0) : cfg_(cfg) {
        Rng rng(substream(init_seed, "classifier-init"));
        if (cfg_.arch == "mlp_head") {
            fc1_ = nn::Linear(cfg_.input_dim, cfg_.hidden, rng);
            fc2_ = nn::Linear(cfg_.hidden, cfg_.classes, rng);
        } else if (cfg_.arch == "tiny_convnet") {
            if (cfg_.height % 4 || cfg_.width % 4)
                throw std::invalid_argument("tiny_convnet: image sides must be multiples of 4");
            conv1_ = nn::Conv2d(cfg_.channels, cfg_.conv1, 3, rng, 1, 1);
            conv2_ = nn::Conv2d(cfg_.conv1, cfg_.conv2, 3, rng, 1, 1);
            const auto flat = cfg_.conv2 * (cfg_.height / 4) * (cfg_.width / 4);
            fc1_ = nn::Linear(flat, cfg_.classes, rng);
        } else {
            throw std::invalid_argument("unknown architecture: " + cfg_.arch);
        }
    }

    const ClassifierConfig& config() const { return cfg_; }

    /// Architecture id string, parseable back into a config.
    std::string architecture_id() const {
        if (cfg_.arch == "mlp_head")
            return "mlp_head:in=" + std::to_string(cfg_.input_dim) +
                   ",hidden=" + std::to_string(cfg_.hidden) +
                   ",classes=" + std::to_string(cfg_.classes);
        return "tiny_convnet:c=" + std::to_string(cfg_.channels) +
               ",h=" + std::to_string(cfg_.height) + ",w=" + std::to_string(cfg_.width) +
               ",c1=" + std::to_string(cfg_.conv1) + ",c2=" + std::to_string(cfg_.conv2) +
               ",classes=" + std::to_string(cfg_.classes);
    }

    static ClassifierConfig parse_architecture_id(const std::string& id) {
        ClassifierConfig cfg;
        const auto colon = id.find(':');
        if (colon == std::string::npos)
            throw std::invalid_argument("bad architecture id: " + id);
        cfg.arch = id.substr(0, colon);
        std::map<std::string, std::int64_t> kv;
        std::string rest = id.substr(colon + 1);
        std::size_t pos = 0;
        while (pos < rest.size()) {
            auto comma = rest.find(',', pos);
            if (comma == std::string::npos) comma = rest.size();
            const auto item = rest.substr(pos, comma - pos);
            const auto eq = item.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("bad architecture id: " + id);
            kv[item.substr(0, eq)] = std::stoll(item.substr(eq + 1));
            pos = comma + 1;
        }
        if (cfg.arch == "mlp_head") {
            cfg.input_dim = kv.at("in");
            cfg.hidden = kv.at("hidden");
            cfg.classes = kv.at("classes");
        } else if (cfg.arch == "tiny_convnet") {
            cfg.channels = kv.at("c");
            cfg.height = kv.at("h");
            cfg.width = kv.at("w");
            cfg.conv1 = kv.at("c1");
            cfg.conv2 = kv.at("c2");
            cfg.classes = kv.at("classes");
            cfg.input_dim = cfg.channels * cfg.height * cfg.width;
        } else {
            throw std::invalid_argument("unknown architecture: " + cfg.arch);
        }
        return cfg;
    }

    codec::LayoutManifest manifest(std::int64_t padded_length = 0) const {
        using codec::LayerEntry;
        using codec::LayerKind;
        std::vector<LayerEntry> entries;
        if (cfg_.arch == "mlp_head") {
            entries = {{"fc1.weight", LayerKind::fc, fc1_.W.value.shape()},
                       {"fc1.bias", LayerKind::bias, fc1_.b.value.shape()},
                       {"fc2.weight", LayerKind::fc, fc2_.W.value.shape()},
                       {"fc2.bias", LayerKind::bias, fc2_.b.value.shape()}};
        } else {
            entries = {{"conv1.weight", LayerKind::conv, conv1_.W.value.shape()},
                       {"conv1.bias", LayerKind::bias, conv1_.b.value.shape()},
                       {"conv2.weight", LayerKind::conv, conv2_.W.value.shape()},
                       {"conv2.bias", LayerKind::bias, conv2_.b.value.shape()},
                       {"fc1.weight", LayerKind::fc, fc1_.W.value.shape()},
                       {"fc1.bias", LayerKind::bias, fc1_.b.value.shape()}};
        }
        return codec::make_manifest(architecture_id(), entries, padded_length);
    }

    std::vector<Tensor> layer_tensors() const {
        if (cfg_.arch == "mlp_head")
            return {fc1_.W.value, fc1_.b.value, fc2_.W.value, fc2_.b.value};
        return {conv1_.W.value, conv1_.b.value, conv2_.W.value, conv2_.b.value, fc1_.W.value,
                fc1_.b.value};
    }

    codec::FlatWeights to_flat(std::int64_t padded_length = 0) const {
        return codec::flatten(layer_tensors(), manifest(padded_length));
    }

    void from_flat(const codec::FlatWeights& flat) {
        if (flat.manifest.architecture_id != architecture_id())
            throw codec::LayoutError("architecture mismatch: weights are for " +
                                     flat.manifest.architecture_id + ", model is " +
                                     architecture_id());
        auto tensors = codec::devectorize(flat, /*strict=*/false);
        std::vector<ag::Param*> ps;
        collect_values(ps);
        for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = tensors[i].clone();
    }

    static Classifier from_manifest(const codec::LayoutManifest& m) {
        Classifier c(parse_architecture_id(m.architecture_id));
        return c;
    }

    nn::NamedParams named_params() {
        nn::NamedParams out;
        if (cfg_.arch == "mlp_head") {
            fc1_.collect("fc1", out);
            fc2_.collect("fc2", out);
        } else {
            conv1_.collect("conv1", out);
            conv2_.collect("conv2", out);
            fc1_.collect("fc1", out);
        }
        return out;
    }

    /// logits for a feature batch (B, input_dim), tape-free.
    Tensor logits(const Tensor& x) const {
        if (x.dim(1) != cfg_.input_dim)
            throw codec::LayoutError("classifier: input dim " + std::to_string(x.dim(1)) +
                                     " != expected " + std::to_string(cfg_.input_dim));
        if (cfg_.arch == "mlp_head") {
            Tensor h = fc1_.apply(x);
            for (auto& v : h.raw()) v = v > 0 ? v : 0.01 * v;
            return fc2_.apply(h);
        }
        const auto b = x.dim(0);
        Tensor img = x.reshaped({b, cfg_.channels, cfg_.height, cfg_.width});
        Graph g;
        auto h = ag::leaky_relu(g, g.input(conv1_.apply(img)), 0.01);
        h = ag::avg_pool2(g, h);
        h = g.input(conv2_.apply(h->val));
        h = ag::leaky_relu(g, h, 0.01);
        h = ag::avg_pool2(g, h);
        Tensor flat_feat = h->val.reshaped({b, h->val.size() / b});
        return fc1_.apply(flat_feat);
    }

    /// logits on the tape, for training.
    VarPtr logits(Graph& g, const Tensor& x) {
        if (cfg_.arch == "mlp_head") {
            auto h = ag::leaky_relu(g, fc1_.forward(g, g.input(x)), 0.01);
            return fc2_.forward(g, h);
        }
        const auto b = x.dim(0);
        auto img = g.input(x.reshaped({b, cfg_.channels, cfg_.height, cfg_.width}));
        auto h = ag::avg_pool2(g, ag::leaky_relu(g, conv1_.forward(g, img), 0.01));
        h = ag::avg_pool2(g, ag::leaky_relu(g, conv2_.forward(g, h), 0.01));
        h = ag::reshape(g, h, {b, h->val.size() / b});
        return fc1_.forward(g, h);
    }

private:
    void collect_values(std::vector<ag::Param*>& out) {
        if (cfg_.arch == "mlp_head") {
            out = {&fc1_.W, &fc1_.b, &fc2_.W, &fc2_.b};
        } else {
            out = {&conv1_.W, &conv1_.b, &conv2_.W, &conv2_.b, &fc1_.W, &fc1_.b};
        }
    }

    ClassifierConfig cfg_;
    nn::Linear fc1_, fc2_;
    nn::Conv2d conv1_, conv2_;
};

/// First-maximum argmax; ties resolve to the lowest class index.
inline std::int64_t argmax_row(const Tensor& logits, std::int64_t row) {
    const auto c = logits.dim(1);
    const double* p = logits.data() + row * c;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
        if (p[j] > p[best]) best = j;
    return best;
}

inline double accuracy(const Classifier& model, const data::SplitData& split) {
    const Tensor lg = model.logits(split.features);
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < lg.dim(0); ++i)
        if (argmax_row(lg, i) == split.labels[static_cast<std::size_t>(i)]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(lg.dim(0));
}

struct EpochStats {
    double loss = 0.0;
    bool diverged = false;
};

/// One epoch of Adam + cross-entropy over deterministic shuffled minibatches.
inline EpochStats train_epoch(Classifier& model, const data::SplitData& split, nn::Adam& opt,
                              std::int64_t batch_size, Rng& rng) {
    const auto n = split.features.dim(0);
    const auto dim = split.features.dim(1);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order.begin(), order.end());

    EpochStats stats;
    std::int64_t steps = 0;
    for (std::int64_t begin = 0; begin < n; begin += batch_size) {
        const auto bs = std::min(batch_size, n - begin);
        Tensor xb({bs, dim});
        std::vector<std::int64_t> yb(static_cast<std::size_t>(bs));
        for (std::int64_t i = 0; i < bs; ++i) {
            const auto src = order[static_cast<std::size_t>(begin + i)];
            std::copy_n(split.features.data() + src * dim, dim, xb.data() + i * dim);
            yb[static_cast<std::size_t>(i)] = split.labels[static_cast<std::size_t>(src)];
        }
        opt.zero_grad();
        Graph g;
        auto loss = ag::softmax_xent(g, model.logits(g, xb), yb);
        if (!std::isfinite(loss->val[0])) {
            stats.diverged = true;
            return stats;
        }
        g.backward(loss);
        opt.step();
        stats.loss += loss->val[0];
        ++steps;
    }
    if (steps) stats.loss /= static_cast<double>(steps);
    return stats;
}

} // namespace wg::cls
