#include "dice/tensor.hpp"

#include "dice/error.hpp"

#include <cstring>

namespace dice {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : data_(Matrix::Constant(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), fill)) {}

Tensor Tensor::row(std::span<const double> values) {
    Tensor t(1, values.size());
    std::copy(values.begin(), values.end(), t.values().begin());
    return t;
}

Tensor Tensor::row(std::initializer_list<double> values) {
    return row(std::span<const double>(values.begin(), values.size()));
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::span<const double> values) {
    std::size_t rows = 1;
    std::size_t cols = 1;
    if (shape.size() == 1) {
        cols = shape[0];
    } else if (shape.size() == 2) {
        rows = shape[0];
        cols = shape[1];
    } else if (!shape.empty()) {
        throw ShapeError("tensors have rank at most 2");
    }
    if (rows * cols != values.size())
        throw ShapeError("shape does not match value count");
    Tensor t(rows, cols);
    std::copy(values.begin(), values.end(), t.values().begin());
    return t;
}

double Tensor::item() const {
    if (size() != 1)
        throw ShapeError("item() on non-scalar tensor of shape " + shape_string());
    return data_(0, 0);
}

std::string Tensor::shape_string() const {
    return "[" + std::to_string(rows()) + "x" + std::to_string(cols()) + "]";
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

} // namespace dice
