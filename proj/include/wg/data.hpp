#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wg/io.hpp"
#include "wg/rng.hpp"
#include "wg/tensor.hpp"

namespace wg::data {

using json = nlohmann::ordered_json;

/// A classification dataset subset: which classes and how many samples per
/// split. Sample pools are per class; train/val/eval windows are disjoint
/// by construction.
struct DatasetSpec {
    std::string dataset_id;
    std::vector<std::int64_t> class_ids;
    std::int64_t samples_per_class_train = 0;
    std::int64_t samples_per_class_eval = 0;
    std::int64_t samples_per_class_val = 0; // held-out split for refinement search
    std::string featurizer_id = "raw-pixel";

    void validate() const {
        if (class_ids.size() < 2) throw std::invalid_argument("dataset spec: need >= 2 classes");
        if (samples_per_class_train <= 0 || samples_per_class_eval <= 0)
            throw std::invalid_argument("dataset spec: need positive train/eval counts");
        if (samples_per_class_val < 0)
            throw std::invalid_argument("dataset spec: negative val count");
    }

    std::int64_t num_classes() const { return static_cast<std::int64_t>(class_ids.size()); }

    json to_json() const {
        return {{"dataset_id", dataset_id},
                {"class_ids", class_ids},
                {"samples_per_class_train", samples_per_class_train},
                {"samples_per_class_eval", samples_per_class_eval},
                {"samples_per_class_val", samples_per_class_val},
                {"featurizer_id", featurizer_id}};
    }

    static DatasetSpec from_json(const json& j) {
        DatasetSpec s;
        s.dataset_id = j.at("dataset_id").get<std::string>();
        s.class_ids = j.at("class_ids").get<std::vector<std::int64_t>>();
        s.samples_per_class_train = j.at("samples_per_class_train").get<std::int64_t>();
        s.samples_per_class_eval = j.at("samples_per_class_eval").get<std::int64_t>();
        s.samples_per_class_val = j.value("samples_per_class_val", std::int64_t{0});
        s.featurizer_id = j.value("featurizer_id", std::string("raw-pixel"));
        s.validate();
        return s;
    }
};

enum class Split { train, val, eval };

/// In-memory dataset: per-class sample pools of flat pixel rows.
struct Dataset {
    std::string dataset_id;
    std::int64_t n_classes = 0;
    std::int64_t per_class = 0;
    std::int64_t channels = 0, height = 0, width = 0;
    double pixel_scale = 1.0;
    Tensor pixels;                    // (n_classes*per_class, c*h*w)
    std::optional<Tensor> embeddings; // precomputed features, same row order
    std::int64_t embedding_dim = 0;

    std::int64_t sample_dim() const { return channels * height * width; }

    std::int64_t row(std::int64_t class_id, std::int64_t sample) const {
        if (class_id < 0 || class_id >= n_classes)
            throw std::out_of_range("dataset: class " + std::to_string(class_id));
        if (sample < 0 || sample >= per_class)
            throw std::out_of_range("dataset: sample " + std::to_string(sample));
        return class_id * per_class + sample;
    }
};

inline std::filesystem::path dataset_dir(const std::filesystem::path& root,
                                         const std::string& id) {
    return root / id;
}

inline void save_dataset(const std::filesystem::path& root, const Dataset& ds) {
    const auto dir = dataset_dir(root, ds.dataset_id);
    std::filesystem::create_directories(dir);
    json meta = {{"dataset_id", ds.dataset_id}, {"n_classes", ds.n_classes},
                 {"per_class", ds.per_class},   {"channels", ds.channels},
                 {"height", ds.height},         {"width", ds.width},
                 {"pixel_scale", ds.pixel_scale}};
    io::save_json(dir / "meta.json", meta);
    io::save_matrix_f32(dir / "data.bin", ds.pixels);
    if (ds.embeddings) {
        io::save_matrix_f32(dir / "features.bin", *ds.embeddings);
        io::save_json(dir / "features.json",
                      {{"n_samples", ds.embeddings->dim(0)}, {"dim", ds.embeddings->dim(1)}});
    }
}

inline Dataset load_dataset(const std::filesystem::path& root, const std::string& id) {
    const auto dir = dataset_dir(root, id);
    if (!std::filesystem::exists(dir / "meta.json"))
        throw std::runtime_error("dataset unreadable: " + (dir / "meta.json").string());
    const json meta = io::load_json(dir / "meta.json");
    Dataset ds;
    ds.dataset_id = meta.at("dataset_id").get<std::string>();
    ds.n_classes = meta.at("n_classes").get<std::int64_t>();
    ds.per_class = meta.at("per_class").get<std::int64_t>();
    ds.channels = meta.at("channels").get<std::int64_t>();
    ds.height = meta.at("height").get<std::int64_t>();
    ds.width = meta.at("width").get<std::int64_t>();
    ds.pixel_scale = meta.value("pixel_scale", 1.0);
    ds.pixels = io::load_matrix_f32(dir / "data.bin", ds.n_classes * ds.per_class,
                                    ds.sample_dim());
    if (std::filesystem::exists(dir / "features.json")) {
        const json fj = io::load_json(dir / "features.json");
        ds.embedding_dim = fj.at("dim").get<std::int64_t>();
        ds.embeddings = io::load_matrix_f32(dir / "features.bin",
                                            fj.at("n_samples").get<std::int64_t>(),
                                            ds.embedding_dim);
    }
    return ds;
}

/// Procedural class-prototype dataset: each class is a noisy cloud around a
/// seeded prototype image, so small classifiers separate it quickly and two
/// dataset ids produce genuinely different tasks.
inline Dataset make_synthetic_dataset(const std::string& id, std::int64_t n_classes,
                                      std::int64_t per_class, std::int64_t channels,
                                      std::int64_t height, std::int64_t width, double noise,
                                      std::uint64_t seed) {
    Dataset ds;
    ds.dataset_id = id;
    ds.n_classes = n_classes;
    ds.per_class = per_class;
    ds.channels = channels;
    ds.height = height;
    ds.width = width;
    ds.pixels = Tensor({n_classes * per_class, ds.sample_dim()});
    Rng proto_rng(substream(seed, "proto/" + id));
    const auto dim = ds.sample_dim();
    std::vector<double> proto(static_cast<std::size_t>(dim));
    for (std::int64_t c = 0; c < n_classes; ++c) {
        for (auto& p : proto) p = std::clamp(0.5 + 0.35 * proto_rng.normal(), 0.0, 1.0);
        Rng rng(substream(seed, "samples/" + id + "/" + std::to_string(c)));
        for (std::int64_t s = 0; s < per_class; ++s) {
            double* rowp = ds.pixels.data() + (c * per_class + s) * dim;
            for (std::int64_t i = 0; i < dim; ++i)
                rowp[i] = std::clamp(proto[static_cast<std::size_t>(i)] + noise * rng.normal(),
                                     0.0, 1.0);
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// featurizers
// ---------------------------------------------------------------------------

/// Feature row for one sample under the spec's featurizer.
/// "raw-pixel": flattened pixels scaled into [0,1].
/// "external-embedding": precomputed feature file row.
inline void featurize_into(const Dataset& ds, const std::string& featurizer_id,
                           std::int64_t sample_row, double* out, std::int64_t dim) {
    if (featurizer_id == "raw-pixel") {
        const double inv = 1.0 / ds.pixel_scale;
        const double* src = ds.pixels.data() + sample_row * ds.sample_dim();
        for (std::int64_t i = 0; i < dim; ++i) out[i] = src[i] * inv;
    } else if (featurizer_id == "external-embedding") {
        if (!ds.embeddings)
            throw std::runtime_error("dataset " + ds.dataset_id + " has no feature file");
        const double* src = ds.embeddings->data() + sample_row * ds.embedding_dim;
        for (std::int64_t i = 0; i < dim; ++i) out[i] = src[i];
    } else {
        throw std::invalid_argument("unknown featurizer: " + featurizer_id);
    }
}

inline std::int64_t feature_dim(const Dataset& ds, const std::string& featurizer_id) {
    if (featurizer_id == "raw-pixel") return ds.sample_dim();
    if (featurizer_id == "external-embedding") {
        if (!ds.embeddings)
            throw std::runtime_error("dataset " + ds.dataset_id + " has no feature file");
        return ds.embedding_dim;
    }
    throw std::invalid_argument("unknown featurizer: " + featurizer_id);
}

/// Labeled feature matrix for one split of a spec. Rows are ordered by
/// (position in class_ids, sample index), so identical calls are identical.
struct SplitData {
    Tensor features; // (n, feature_dim)
    std::vector<std::int64_t> labels;
};

inline std::int64_t split_offset(const DatasetSpec& spec, Split split) {
    switch (split) {
        case Split::train: return 0;
        case Split::val: return spec.samples_per_class_train;
        case Split::eval: return spec.samples_per_class_train + spec.samples_per_class_val;
    }
    return 0;
}

inline std::int64_t split_count(const DatasetSpec& spec, Split split) {
    switch (split) {
        case Split::train: return spec.samples_per_class_train;
        case Split::val: return spec.samples_per_class_val;
        case Split::eval: return spec.samples_per_class_eval;
    }
    return 0;
}

inline SplitData load_split(const Dataset& ds, const DatasetSpec& spec, Split split) {
    spec.validate();
    const std::int64_t offset = split_offset(spec, split);
    const std::int64_t count = split_count(spec, split);
    if (count == 0) throw std::invalid_argument("empty split requested");
    if (offset + count > ds.per_class)
        throw std::runtime_error("dataset " + ds.dataset_id + ": class pool too small (" +
                                 std::to_string(ds.per_class) + " < " +
                                 std::to_string(offset + count) + ")");
    const std::int64_t dim = feature_dim(ds, spec.featurizer_id);
    const auto n_cls = spec.num_classes();
    SplitData out;
    out.features = Tensor({n_cls * count, dim});
    out.labels.resize(static_cast<std::size_t>(n_cls * count));
    std::int64_t r = 0;
    for (std::int64_t ci = 0; ci < n_cls; ++ci) {
        for (std::int64_t s = 0; s < count; ++s, ++r) {
            featurize_into(ds, spec.featurizer_id, ds.row(spec.class_ids[ci], offset + s),
                           out.features.data() + r * dim, dim);
            out.labels[static_cast<std::size_t>(r)] = ci;
        }
    }
    return out;
}

/// Class-grouped sample sets for conditioning: n samples per class, drawn
/// from the given split window. Labels never enter the encoding input.
struct SampleSetBatch {
    std::vector<Tensor> class_sets; // each (n_i, feature_dim)

    std::int64_t num_classes() const { return static_cast<std::int64_t>(class_sets.size()); }
    std::int64_t feature_dim() const {
        return class_sets.empty() ? 0 : class_sets.front().dim(1);
    }
    void validate() const {
        if (class_sets.empty()) throw std::invalid_argument("sample set batch: no classes");
        for (const auto& s : class_sets)
            if (s.dim(0) == 0) throw std::invalid_argument("sample set batch: empty class set");
    }
};

inline SampleSetBatch draw_sample_sets(const Dataset& ds, const DatasetSpec& spec,
                                       std::int64_t n_per_class, Rng& rng,
                                       Split window = Split::train) {
    const std::int64_t offset = split_offset(spec, window);
    const std::int64_t count = split_count(spec, window);
    const std::int64_t dim = feature_dim(ds, spec.featurizer_id);
    SampleSetBatch batch;
    for (std::int64_t ci = 0; ci < spec.num_classes(); ++ci) {
        Tensor set({n_per_class, dim});
        for (std::int64_t s = 0; s < n_per_class; ++s) {
            const auto pick = offset + static_cast<std::int64_t>(rng.below(
                                           static_cast<std::uint64_t>(count)));
            featurize_into(ds, spec.featurizer_id, ds.row(spec.class_ids[ci], pick),
                           set.data() + s * dim, dim);
        }
        batch.class_sets.push_back(std::move(set));
    }
    return batch;
}

/// Dataset registry with caching; all consumers resolve datasets through
/// this so repeated evaluations do not reread files.
class DataContext {
public:
    explicit DataContext(std::filesystem::path root) : root_(std::move(root)) {}

    static std::filesystem::path default_root() {
        if (const char* env = std::getenv("WG_DATA_DIR")) return env;
        return "data";
    }

    const std::filesystem::path& root() const { return root_; }

    const Dataset& get(const std::string& id) const {
        auto it = cache_.find(id);
        if (it == cache_.end())
            it = cache_.emplace(id, std::make_shared<Dataset>(load_dataset(root_, id))).first;
        return *it->second;
    }

    void put(Dataset ds) {
        const auto id = ds.dataset_id;
        cache_[id] = std::make_shared<Dataset>(std::move(ds));
    }

private:
    std::filesystem::path root_;
    mutable std::map<std::string, std::shared_ptr<Dataset>> cache_;
};

} // namespace wg::data
