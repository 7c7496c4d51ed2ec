#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace unicon {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major fp64 array. Reshape copies; there are no strided views.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor vector(std::initializer_list<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const noexcept { return data_.size(); }

    // Size of the trailing axis; the rest is treated as rows.
    std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double item() const;

    Tensor reshaped(Shape shape) const;
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

// Bitwise equality; distinguishes -0.0 from 0.0 and compares NaN payloads.
bool bit_identical(const Tensor& a, const Tensor& b);

}  // namespace unicon
