#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wg/tensor.hpp"

namespace wg::codec {

using json = nlohmann::ordered_json;

enum class LayerKind { fc, conv, norm, bias, other };

inline std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::fc: return "fc";
        case LayerKind::conv: return "conv";
        case LayerKind::norm: return "norm";
        case LayerKind::bias: return "bias";
        case LayerKind::other: return "other";
    }
    return "other";
}

inline LayerKind layer_kind_from(const std::string& s) {
    if (s == "fc") return LayerKind::fc;
    if (s == "conv") return LayerKind::conv;
    if (s == "norm") return LayerKind::norm;
    if (s == "bias") return LayerKind::bias;
    if (s == "other") return LayerKind::other;
    throw std::invalid_argument("unknown layer kind: " + s);
}

struct LayoutError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CorruptionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IncompleteSetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LayerEntry {
    std::string name;
    LayerKind kind = LayerKind::other;
    std::vector<std::int64_t> shape;
    std::int64_t offset = 0;
    std::int64_t length = 0;
};

/// Ordering and shape record for one architecture's flattened parameters.
/// Persisted next to every flat vector; decoding truncates to total_length
/// before reshaping, which makes the padding region unambiguous.
struct LayoutManifest {
    std::string architecture_id;
    std::vector<LayerEntry> layers;
    std::int64_t total_length = 0;  // d
    std::int64_t padded_length = 0; // d_max >= d

    void validate() const {
        std::int64_t off = 0;
        for (const auto& l : layers) {
            if (l.offset != off)
                throw LayoutError("manifest: non-contiguous offset at layer " + l.name);
            std::int64_t n = 1;
            for (auto d : l.shape) n *= d;
            if (n != l.length || l.length <= 0)
                throw LayoutError("manifest: shape/length mismatch at layer " + l.name);
            off += l.length;
        }
        if (off != total_length) throw LayoutError("manifest: lengths do not sum to d");
        if (padded_length < total_length) throw LayoutError("manifest: d_max < d");
    }

    json to_json() const {
        json j;
        j["architecture_id"] = architecture_id;
        j["d"] = total_length;
        j["d_max"] = padded_length;
        j["layers"] = json::array();
        for (const auto& l : layers)
            j["layers"].push_back({{"name", l.name},
                                   {"kind", to_string(l.kind)},
                                   {"shape", l.shape},
                                   {"offset", l.offset},
                                   {"length", l.length}});
        return j;
    }

    static LayoutManifest from_json(const json& j) {
        LayoutManifest m;
        m.architecture_id = j.at("architecture_id").get<std::string>();
        m.total_length = j.at("d").get<std::int64_t>();
        m.padded_length = j.at("d_max").get<std::int64_t>();
        for (const auto& lj : j.at("layers")) {
            LayerEntry l;
            l.name = lj.at("name").get<std::string>();
            l.kind = layer_kind_from(lj.at("kind").get<std::string>());
            l.shape = lj.at("shape").get<std::vector<std::int64_t>>();
            l.offset = lj.at("offset").get<std::int64_t>();
            l.length = lj.at("length").get<std::int64_t>();
            m.layers.push_back(std::move(l));
        }
        m.validate();
        return m;
    }
};

/// Build a manifest from ordered (name, kind, shape) triples.
inline LayoutManifest make_manifest(std::string architecture_id,
                                    const std::vector<LayerEntry>& entries,
                                    std::int64_t padded_length = 0) {
    LayoutManifest m;
    m.architecture_id = std::move(architecture_id);
    std::int64_t off = 0;
    for (auto l : entries) {
        l.offset = off;
        l.length = 1;
        for (auto d : l.shape) l.length *= d;
        off += l.length;
        m.layers.push_back(std::move(l));
    }
    m.total_length = off;
    m.padded_length = padded_length > 0 ? padded_length : off;
    m.validate();
    return m;
}

/// Flat, padded view of one model's parameters.
struct FlatWeights {
    Tensor values; // length d_max, padding region zero
    LayoutManifest manifest;

    void validate() const {
        manifest.validate();
        if (values.size() != manifest.padded_length)
            throw CorruptionError("flat weights: value count " + std::to_string(values.size()) +
                                  " != d_max " + std::to_string(manifest.padded_length));
        for (std::int64_t i = manifest.total_length; i < manifest.padded_length; ++i)
            if (values[i] != 0.0)
                throw CorruptionError("flat weights: nonzero padding at index " +
                                      std::to_string(i));
    }
};

/// Concatenate per-layer tensors (manifest order) into a padded flat vector.
inline FlatWeights flatten(const std::vector<Tensor>& model_params,
                           const LayoutManifest& manifest) {
    manifest.validate();
    if (model_params.size() != manifest.layers.size())
        throw LayoutError("flatten: expected " + std::to_string(manifest.layers.size()) +
                          " layers, got " + std::to_string(model_params.size()));
    FlatWeights fw;
    fw.manifest = manifest;
    fw.values = Tensor::zeros({manifest.padded_length});
    for (std::size_t i = 0; i < manifest.layers.size(); ++i) {
        const auto& entry = manifest.layers[i];
        const auto& t = model_params[i];
        if (t.shape() != entry.shape)
            throw LayoutError("flatten: shape mismatch at layer " + entry.name + ": expected " +
                              shape_str(entry.shape) + ", got " + shape_str(t.shape()));
        std::copy_n(t.data(), entry.length, fw.values.data() + entry.offset);
    }
    return fw;
}

/// Inverse of flatten. Truncates to d (ignoring padding) and reshapes each
/// segment; strict mode additionally rejects nonzero padding.
inline std::vector<Tensor> devectorize(const FlatWeights& flat, bool strict = true) {
    flat.manifest.validate();
    if (flat.values.size() < flat.manifest.total_length)
        throw CorruptionError("devectorize: vector shorter than manifest d");
    if (strict) flat.validate();
    std::vector<Tensor> out;
    out.reserve(flat.manifest.layers.size());
    for (const auto& entry : flat.manifest.layers) {
        Tensor t(entry.shape);
        std::copy_n(flat.values.data() + entry.offset, entry.length, t.data());
        out.push_back(std::move(t));
    }
    return out;
}

/// Extract one named layer segment as a flat vector.
inline Tensor layer_segment(const FlatWeights& flat, const std::string& name) {
    for (const auto& entry : flat.manifest.layers)
        if (entry.name == name) {
            Tensor t({entry.length});
            std::copy_n(flat.values.data() + entry.offset, entry.length, t.data());
            return t;
        }
    throw LayoutError("no such layer: " + name);
}

inline void set_layer_segment(FlatWeights& flat, const std::string& name, const Tensor& seg) {
    for (const auto& entry : flat.manifest.layers)
        if (entry.name == name) {
            if (seg.size() != entry.length)
                throw LayoutError("segment length mismatch for layer " + name);
            std::copy_n(seg.data(), entry.length, flat.values.data() + entry.offset);
            return;
        }
    throw LayoutError("no such layer: " + name);
}

/// Equal-length sub-vectors of a padded segment, keyed by chunk index.
struct ChunkSet {
    std::int64_t chunk_length = 0;             // l
    std::vector<Tensor> chunks;                // k vectors of length l
    std::vector<std::int64_t> chunk_indices;   // 0..k-1 (any order)
    std::int64_t source_length = 0;            // mn
    std::optional<std::string> source_layer;
};

/// Split a flat segment into ceil(mn/l) chunks of length l; the last chunk
/// is zero-padded.
inline ChunkSet chunk(const Tensor& flat_segment, std::int64_t chunk_length) {
    if (chunk_length <= 0) throw std::invalid_argument("chunk: chunk_length must be positive");
    const std::int64_t mn = flat_segment.size();
    if (mn == 0) throw std::invalid_argument("chunk: empty segment");
    const std::int64_t k = (mn + chunk_length - 1) / chunk_length;
    ChunkSet cs;
    cs.chunk_length = chunk_length;
    cs.source_length = mn;
    for (std::int64_t i = 0; i < k; ++i) {
        Tensor c({chunk_length});
        const std::int64_t begin = i * chunk_length;
        const std::int64_t n = std::min(chunk_length, mn - begin);
        std::copy_n(flat_segment.data() + begin, n, c.data());
        cs.chunks.push_back(std::move(c));
        cs.chunk_indices.push_back(i);
    }
    return cs;
}

/// Chunk-count helper: the paper-facing parameterization is k-driven,
/// l = ceil(mn/k); the API is length-driven.
inline std::int64_t chunk_length_for_count(std::int64_t mn, std::int64_t k) {
    if (k <= 0 || mn <= 0) throw std::invalid_argument("chunk_length_for_count: bad arguments");
    return (mn + k - 1) / k;
}

/// Concatenate chunks in index order and truncate to the source length.
inline Tensor reassemble(const ChunkSet& chunks) {
    const auto k = static_cast<std::int64_t>(chunks.chunks.size());
    if (k == 0) throw IncompleteSetError("reassemble: empty chunk set");
    std::vector<std::int64_t> order(static_cast<std::size_t>(k), -1);
    for (std::int64_t i = 0; i < k; ++i) {
        const auto idx = chunks.chunk_indices.at(static_cast<std::size_t>(i));
        if (idx < 0 || idx >= k || order[static_cast<std::size_t>(idx)] != -1)
            throw IncompleteSetError("reassemble: bad or duplicate chunk index " +
                                     std::to_string(idx));
        order[static_cast<std::size_t>(idx)] = i;
    }
    for (std::int64_t i = 0; i < k; ++i)
        if (order[static_cast<std::size_t>(i)] == -1)
            throw IncompleteSetError("reassemble: missing chunk index " + std::to_string(i));
    if (chunks.source_length <= 0 || chunks.source_length > k * chunks.chunk_length)
        throw IncompleteSetError("reassemble: inconsistent source length");
    Tensor out({chunks.source_length});
    std::int64_t written = 0;
    for (std::int64_t i = 0; i < k && written < chunks.source_length; ++i) {
        const auto& c = chunks.chunks[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        if (c.size() != chunks.chunk_length)
            throw IncompleteSetError("reassemble: chunk length mismatch");
        const std::int64_t n = std::min(chunks.chunk_length, chunks.source_length - written);
        std::copy_n(c.data(), n, out.data() + written);
        written += n;
    }
    return out;
}

/// Round every value to the nearest float32. Stored weights are float32 on
/// disk; quantizing before metrics are computed keeps accuracy bookkeeping
/// bit-exact across save/load round trips.
inline void quantize_f32(Tensor& t) {
    for (std::int64_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<double>(static_cast<float>(t[i]));
}

// ---------------------------------------------------------------------------
// disk format: one JSON header line, then little-endian float32 values
// ---------------------------------------------------------------------------

inline void save_flat_weights(const std::filesystem::path& path, const FlatWeights& fw,
                              const json& provenance = json()) {
    fw.validate();
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    json header = fw.manifest.to_json();
    if (!provenance.is_null()) header["provenance"] = provenance;
    const std::string line = header.dump() + "\n";
    f.write(line.data(), static_cast<std::streamsize>(line.size()));
    for (std::int64_t i = 0; i < fw.values.size(); ++i) {
        const float v = static_cast<float>(fw.values[i]);
        f.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
}

inline FlatWeights load_flat_weights(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw CorruptionError("flat weights file missing header");
    FlatWeights fw;
    fw.manifest = LayoutManifest::from_json(json::parse(line));
    fw.values = Tensor::zeros({fw.manifest.padded_length});
    for (std::int64_t i = 0; i < fw.values.size(); ++i) {
        float v;
        f.read(reinterpret_cast<char*>(&v), sizeof(float));
        if (!f) throw CorruptionError("flat weights file truncated: " + path.string());
        fw.values[i] = static_cast<double>(v);
    }
    fw.validate();
    return fw;
}

} // namespace wg::codec
