#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "wg/rng.hpp"

namespace wg {

using MatX = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatX>;
using ConstMatMap = Eigen::Map<const MatX>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

/// Dense row-major tensor of doubles with shared storage. Copies are
/// shallow; operations that produce new values allocate fresh storage.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

    Tensor(std::vector<std::int64_t> shape, double fill)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(count(shape_), fill)) {}

    Tensor(std::vector<std::int64_t> shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(values))) {
        if (static_cast<std::int64_t>(data_->size()) != count(shape_))
            throw std::invalid_argument("tensor: value count does not match shape");
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, double v) {
        return Tensor(std::move(shape), v);
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor randn(std::vector<std::int64_t> shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& x : t.raw()) x = stddev * rng.normal();
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t ndim() const { return shape_.size(); }
    std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    std::vector<double>& raw() { return *data_; }
    const std::vector<double>& raw() const { return *data_; }

    double& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    /// Deep copy.
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<double>>(*data_);
        return t;
    }

    /// Same storage, new shape (element count must match).
    Tensor reshaped(std::vector<std::int64_t> shape) const {
        if (count(shape) != size())
            throw std::invalid_argument("tensor: reshape changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    void fill(double v) { std::fill(data_->begin(), data_->end(), v); }

    /// 2-D view: collapses leading dims into rows.
    MatMap mat(std::int64_t rows, std::int64_t cols) {
        if (rows * cols != size()) throw std::invalid_argument("tensor: bad matrix view");
        return MatMap(data(), rows, cols);
    }
    ConstMatMap mat(std::int64_t rows, std::int64_t cols) const {
        if (rows * cols != size()) throw std::invalid_argument("tensor: bad matrix view");
        return ConstMatMap(data(), rows, cols);
    }

    /// View as (dim0, rest) matrix.
    MatMap mat2() {
        if (shape_.empty()) throw std::invalid_argument("tensor: mat2 on scalar");
        return mat(shape_[0], size() / shape_[0]);
    }
    ConstMatMap mat2() const {
        if (shape_.empty()) throw std::invalid_argument("tensor: mat2 on scalar");
        return mat(shape_[0], size() / shape_[0]);
    }

    VecMap vec() { return VecMap(data(), size()); }
    ConstVecMap vec() const { return ConstVecMap(data(), size()); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static std::int64_t count(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (auto d : shape) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<std::int64_t> shape_;
    std::shared_ptr<std::vector<double>> data_;
};

inline std::string shape_str(const std::vector<std::int64_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

} // namespace wg
