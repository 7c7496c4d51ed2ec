#include "unicon/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "unicon/errors.hpp"

namespace unicon {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                         " elements");
    }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace unicon
