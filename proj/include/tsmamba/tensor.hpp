#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace tsmamba {

using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of Real. A default-constructed tensor is "empty"
/// (rank 0, no storage) and is used for absent gradients.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, Real fill = 0.0);
    Tensor(Shape shape, std::vector<Real> data);

    static Tensor scalar(Real value) { return Tensor({1}, {value}); }
    static Tensor from(std::initializer_list<Real> values);
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return shape_.empty(); }

    std::span<Real> data() noexcept { return data_; }
    std::span<const Real> data() const noexcept { return data_; }
    Real* ptr() noexcept { return data_.data(); }
    const Real* ptr() const noexcept { return data_.data(); }
    const std::vector<Real>& storage() const noexcept { return data_; }

    Real& operator[](std::size_t i) noexcept { return data_[i]; }
    Real operator[](std::size_t i) const noexcept { return data_[i]; }

    Real& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    Real at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    Real& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    Real at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    /// Same data, new shape of equal element count.
    Tensor reshaped(Shape shape) const;

    /// Rows [start, start + count) of a rank-2 tensor.
    Tensor rows(std::size_t start, std::size_t count) const;
    Tensor transposed() const;

    bool all_finite() const noexcept;
    Real item() const;

    void fill(Real value);
    Tensor& operator+=(const Tensor& other);

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<Real> data_;
};

/// Bitwise equality (distinguishes -0.0 and NaN payloads).
bool bit_identical(const Tensor& a, const Tensor& b);
Real max_abs_diff(const Tensor& a, const Tensor& b);

void require_shape(const Tensor& t, const Shape& expected, const char* what);
void require_rank(const Tensor& t, std::size_t rank, const char* what);

}  // namespace tsmamba
