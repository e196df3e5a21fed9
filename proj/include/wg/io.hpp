#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wg/nn.hpp"
#include "wg/rng.hpp"
#include "wg/tensor.hpp"

namespace wg::io {

using json = nlohmann::ordered_json; // key order fixed so reports are byte-stable

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void save_json(const std::filesystem::path& path, const json& j) {
    write_file(path, j.dump(2) + "\n");
}

inline json load_json(const std::filesystem::path& path) {
    return json::parse(read_file(path));
}

/// Content fingerprint (FNV-1a, not cryptographic) as fixed-width hex.
inline std::string file_fingerprint(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    std::ostringstream ss;
    ss << std::hex << std::setfill('0') << std::setw(16) << fnv1a64(bytes);
    return ss.str();
}

// ---------------------------------------------------------------------------
// named-tensor checkpoint blob (little-endian)
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint blob truncated");
    return v;
}
} // namespace detail

inline constexpr std::uint32_t kBlobMagic = 0x57474231; // "WGB1"

inline void save_tensors(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    detail::put<std::uint32_t>(f, kBlobMagic);
    detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(t.ndim()));
        for (auto d : t.shape()) detail::put<std::int64_t>(f, d);
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
}

inline std::vector<std::pair<std::string, Tensor>> load_tensors(
    const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path.string());
    if (detail::get<std::uint32_t>(f) != kBlobMagic)
        throw std::runtime_error("not a checkpoint blob: " + path.string());
    const auto count = detail::get<std::uint32_t>(f);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = detail::get<std::uint32_t>(f);
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        const auto nd = detail::get<std::uint32_t>(f);
        std::vector<std::int64_t> shape(nd);
        for (auto& d : shape) d = detail::get<std::int64_t>(f);
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!f) throw std::runtime_error("checkpoint blob truncated: " + path.string());
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

inline void save_params(const std::filesystem::path& path, const nn::NamedParams& params) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    tensors.reserve(params.size());
    for (const auto& [name, p] : params) tensors.emplace_back(name, p->value);
    save_tensors(path, tensors);
}

inline void load_params(const std::filesystem::path& path, const nn::NamedParams& params) {
    auto tensors = load_tensors(path);
    if (tensors.size() != params.size())
        throw std::runtime_error("checkpoint parameter count mismatch: " + path.string());
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params[i];
        if (tensors[i].first != name)
            throw std::runtime_error("checkpoint parameter name mismatch: expected " + name +
                                     ", got " + tensors[i].first);
        if (tensors[i].second.shape() != p->value.shape())
            throw std::runtime_error("checkpoint parameter shape mismatch for " + name);
        p->value = std::move(tensors[i].second);
        p->grad = Tensor::zeros(p->value.shape());
    }
}

// float32 matrix files (features, embedding exports)

inline void save_matrix_f32(const std::filesystem::path& path, const Tensor& m) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    for (std::int64_t i = 0; i < m.size(); ++i) {
        const float v = static_cast<float>(m[i]);
        f.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
}

inline Tensor load_matrix_f32(const std::filesystem::path& path, std::int64_t rows,
                              std::int64_t cols) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path.string());
    Tensor out({rows, cols});
    for (std::int64_t i = 0; i < out.size(); ++i) {
        float v;
        f.read(reinterpret_cast<char*>(&v), sizeof(float));
        if (!f) throw std::runtime_error("matrix file truncated: " + path.string());
        out[i] = static_cast<double>(v);
    }
    return out;
}

} // namespace wg::io
