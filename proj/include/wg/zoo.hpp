#pragma once

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "wg/classifier.hpp"
#include "wg/codec.hpp"
#include "wg/data.hpp"
#include "wg/io.hpp"

namespace wg::zoo {

using json = nlohmann::ordered_json;

struct ZooRecord {
    std::string record_id;
    std::string dataset_id;
    std::int64_t epoch = 0;
    std::string weights_file; // relative to the zoo directory
    double train_acc = 0.0;
    double eval_acc = 0.0;
    bool valid = true;
    std::string fingerprint;

    json to_json() const {
        return {{"record_id", record_id}, {"dataset_id", dataset_id},
                {"epoch", epoch},         {"weights_file", weights_file},
                {"train_acc", train_acc}, {"eval_acc", eval_acc},
                {"valid", valid},         {"fingerprint", fingerprint}};
    }

    static ZooRecord from_json(const json& j) {
        ZooRecord r;
        r.record_id = j.at("record_id").get<std::string>();
        r.dataset_id = j.at("dataset_id").get<std::string>();
        r.epoch = j.at("epoch").get<std::int64_t>();
        r.weights_file = j.at("weights_file").get<std::string>();
        r.train_acc = j.at("train_acc").get<double>();
        r.eval_acc = j.at("eval_acc").get<double>();
        r.valid = j.at("valid").get<bool>();
        r.fingerprint = j.value("fingerprint", std::string());
        return r;
    }
};

struct TrainerConfig {
    std::string arch = "mlp_head";
    std::int64_t hidden = 128;
    std::int64_t epochs = 30;
    std::int64_t keep_last = 10; // checkpoint window length
    std::int64_t runs_per_spec = 1;
    std::int64_t batch_size = 32;
    double lr = 1e-3;

    json to_json() const {
        return {{"arch", arch},           {"hidden", hidden},
                {"epochs", epochs},       {"keep_last", keep_last},
                {"runs_per_spec", runs_per_spec}, {"batch_size", batch_size},
                {"lr", lr}};
    }

    static TrainerConfig from_json(const json& j) {
        TrainerConfig c;
        c.arch = j.value("arch", c.arch);
        c.hidden = j.value("hidden", c.hidden);
        c.epochs = j.value("epochs", c.epochs);
        c.keep_last = j.value("keep_last", c.keep_last);
        c.runs_per_spec = j.value("runs_per_spec", c.runs_per_spec);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        return c;
    }
};

struct ZooManifest {
    std::vector<data::DatasetSpec> specs;
    std::vector<ZooRecord> records;
    TrainerConfig trainer;
    std::uint64_t seed = 0;

    const data::DatasetSpec& spec_for(const std::string& dataset_id) const {
        for (const auto& s : specs)
            if (s.dataset_id == dataset_id) return s;
        throw std::runtime_error("zoo manifest: no spec for dataset " + dataset_id);
    }

    std::vector<const ZooRecord*> valid_records() const {
        std::vector<const ZooRecord*> out;
        for (const auto& r : records)
            if (r.valid) out.push_back(&r);
        return out;
    }

    json to_json() const {
        json j;
        j["seed"] = seed;
        j["trainer"] = trainer.to_json();
        j["specs"] = json::array();
        for (const auto& s : specs) j["specs"].push_back(s.to_json());
        j["records"] = json::array();
        for (const auto& r : records) j["records"].push_back(r.to_json());
        return j;
    }

    static ZooManifest from_json(const json& j) {
        ZooManifest m;
        m.seed = j.at("seed").get<std::uint64_t>();
        m.trainer = TrainerConfig::from_json(j.at("trainer"));
        for (const auto& sj : j.at("specs")) m.specs.push_back(data::DatasetSpec::from_json(sj));
        for (const auto& rj : j.at("records")) m.records.push_back(ZooRecord::from_json(rj));
        return m;
    }
};

inline void save_manifest(const std::filesystem::path& zoo_dir, const ZooManifest& m) {
    io::save_json(zoo_dir / "manifest.json", m.to_json());
}

inline ZooManifest load_manifest(const std::filesystem::path& zoo_dir) {
    return ZooManifest::from_json(io::load_json(zoo_dir / "manifest.json"));
}

inline cls::ClassifierConfig classifier_config_for(const data::Dataset& ds,
                                                   const data::DatasetSpec& spec,
                                                   const TrainerConfig& trainer) {
    cls::ClassifierConfig cfg;
    cfg.arch = trainer.arch;
    cfg.classes = spec.num_classes();
    cfg.hidden = trainer.hidden;
    if (trainer.arch == "tiny_convnet") {
        cfg.channels = ds.channels;
        cfg.height = ds.height;
        cfg.width = ds.width;
        cfg.input_dim = ds.channels * ds.height * ds.width;
        if (spec.featurizer_id != "raw-pixel")
            throw std::invalid_argument("tiny_convnet needs raw-pixel inputs");
    } else {
        cfg.input_dim = data::feature_dim(ds, spec.featurizer_id);
    }
    return cfg;
}

/// Deterministic accuracy of a flat weight vector on the spec's eval split.
inline double evaluate(const codec::FlatWeights& flat, const data::DatasetSpec& spec,
                       const data::DataContext& ctx, data::Split split = data::Split::eval) {
    auto model = cls::Classifier::from_manifest(flat.manifest);
    model.from_flat(flat);
    const auto& ds = ctx.get(spec.dataset_id);
    return cls::accuracy(model, data::load_split(ds, spec, split));
}

/// Rank candidates by eval accuracy (descending, stable) and keep the top k.
inline std::vector<std::pair<const codec::FlatWeights*, double>> topk_select(
    const std::vector<codec::FlatWeights>& candidates, const data::DatasetSpec& spec,
    std::size_t k, const data::DataContext& ctx) {
    if (candidates.empty()) throw std::invalid_argument("topk_select: no candidates");
    if (k > candidates.size()) throw std::invalid_argument("topk_select: k > candidate count");
    std::vector<std::pair<const codec::FlatWeights*, double>> scored;
    scored.reserve(candidates.size());
    for (const auto& c : candidates) scored.emplace_back(&c, evaluate(c, spec, ctx));
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    scored.resize(k);
    return scored;
}

/// Train classifiers for every spec and persist the last `keep_last`
/// checkpoints of each run as zoo records. A diverging run still yields
/// records, marked invalid, and the build continues.
inline ZooManifest build_zoo(const std::vector<data::DatasetSpec>& specs,
                             const TrainerConfig& trainer, const data::DataContext& ctx,
                             const std::filesystem::path& zoo_dir, std::uint64_t seed) {
    ZooManifest manifest;
    manifest.specs = specs;
    manifest.trainer = trainer;
    manifest.seed = seed;
    std::filesystem::create_directories(zoo_dir / "weights");

    // one shared padded length so multi-dataset zoos vectorize uniformly
    std::int64_t d_max = 0;
    for (const auto& spec : specs) {
        const auto& ds = ctx.get(spec.dataset_id);
        cls::Classifier probe(classifier_config_for(ds, spec, trainer));
        d_max = std::max(d_max, probe.manifest().total_length);
    }

    for (const auto& spec : specs) {
        spec.validate();
        const auto& ds = ctx.get(spec.dataset_id);
        const auto train_split = data::load_split(ds, spec, data::Split::train);
        const auto eval_split = data::load_split(ds, spec, data::Split::eval);
        for (std::int64_t run = 0; run < trainer.runs_per_spec; ++run) {
            const std::string run_name =
                "zoo/ds=" + spec.dataset_id + "/run=" + std::to_string(run);
            cls::Classifier model(classifier_config_for(ds, spec, trainer),
                                  substream(seed, run_name + "/init"));
            auto named = model.named_params();
            nn::Adam opt(nn::param_ptrs(named), {.lr = trainer.lr});
            Rng rng = substream_rng(seed, run_name + "/batches");
            bool diverged = false;
            for (std::int64_t epoch = 1; epoch <= trainer.epochs; ++epoch) {
                if (!diverged)
                    diverged = cls::train_epoch(model, train_split, opt, trainer.batch_size, rng)
                                   .diverged;
                if (epoch <= trainer.epochs - trainer.keep_last) continue;

                auto flat = model.to_flat(d_max);
                codec::quantize_f32(flat.values); // metrics must survive the f32 disk format
                ZooRecord rec;
                rec.dataset_id = spec.dataset_id;
                rec.epoch = epoch;
                rec.record_id = spec.dataset_id + "-r" + std::to_string(run) + "-e" +
                                std::to_string(epoch);
                rec.weights_file = "weights/" + rec.record_id + ".bin";
                rec.valid = !diverged;
                if (rec.valid) {
                    cls::Classifier scored(model.config());
                    scored.from_flat(flat);
                    rec.train_acc = cls::accuracy(scored, train_split);
                    rec.eval_acc = cls::accuracy(scored, eval_split);
                }
                const auto path = zoo_dir / rec.weights_file;
                codec::save_flat_weights(path, flat,
                                         {{"kind", "zoo-checkpoint"},
                                          {"dataset_id", rec.dataset_id},
                                          {"epoch", rec.epoch}});
                rec.fingerprint = io::file_fingerprint(path);
                manifest.records.push_back(std::move(rec));
            }
        }
    }
    save_manifest(zoo_dir, manifest);
    return manifest;
}

inline codec::FlatWeights load_record_weights(const std::filesystem::path& zoo_dir,
                                              const ZooRecord& rec) {
    return codec::load_flat_weights(zoo_dir / rec.weights_file);
}

} // namespace wg::zoo
