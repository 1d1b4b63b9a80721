#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dice {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense rank-0..2 tensor of doubles stored row-major.
///
/// A vector of length n is a 1 x n row; a scalar is 1 x 1. The storage is an
/// Eigen matrix so that dense products go through Eigen's kernels, but the
/// public view is a shape plus a flat row-major value span.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
    explicit Tensor(Matrix m) : data_(std::move(m)) {}

    static Tensor scalar(double v) { return Tensor(1, 1, v); }
    static Tensor row(std::span<const double> values);
    static Tensor row(std::initializer_list<double> values);
    /// Builds from an explicit shape (rank 1 or 2) and row-major values.
    static Tensor from(std::vector<std::size_t> shape, std::span<const double> values);

    std::size_t rows() const { return static_cast<std::size_t>(data_.rows()); }
    std::size_t cols() const { return static_cast<std::size_t>(data_.cols()); }
    std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
    std::vector<std::size_t> shape() const { return {rows(), cols()}; }
    bool same_shape(const Tensor& o) const { return rows() == o.rows() && cols() == o.cols(); }

    double& operator()(std::size_t r, std::size_t c) { return data_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)); }
    double operator()(std::size_t r, std::size_t c) const { return data_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)); }

    std::span<double> values() { return {data_.data(), size()}; }
    std::span<const double> values() const { return {data_.data(), size()}; }
    std::span<const double> row_span(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
    std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

    /// Value of a 1 x 1 tensor; throws otherwise.
    double item() const;
    bool all_finite() const { return data_.allFinite(); }

    Matrix& mat() { return data_; }
    const Matrix& mat() const { return data_; }

    std::string shape_string() const;

private:
    Matrix data_;
};

bool bit_equal(const Tensor& a, const Tensor& b);

} // namespace dice
