#include "tsmamba/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "tsmamba/error.hpp"

namespace tsmamba {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::InvalidConfig: return "InvalidConfig";
        case ErrorKind::NonPositiveDt: return "NonPositiveDt";
        case ErrorKind::GraphError: return "GraphError";
        case ErrorKind::DegenerateWindow: return "DegenerateWindow";
        case ErrorKind::PatchLengthMismatch: return "PatchLengthMismatch";
        case ErrorKind::InsufficientPatches: return "InsufficientPatches";
        case ErrorKind::MissingGrad: return "MissingGrad";
        case ErrorKind::DataError: return "DataError";
        case ErrorKind::ParseError: return "ParseError";
        case ErrorKind::RaggedRows: return "RaggedRows";
        case ErrorKind::CheckpointMismatch: return "CheckpointMismatch";
        case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
        case ErrorKind::VersionMismatch: return "VersionMismatch";
        case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_dims(const Shape& shape) {
    require(!shape.empty(), ErrorKind::ShapeMismatch, "tensor shape must have rank >= 1");
    for (auto d : shape) {
        require(d > 0, ErrorKind::ShapeMismatch, "tensor dimensions must be positive, got " + shape_str(shape));
    }
}

}  // namespace

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
    check_dims(shape_);
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims(shape_);
    require(shape_numel(shape_) == data_.size(), ErrorKind::ShapeMismatch,
            "data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

Tensor Tensor::from(std::initializer_list<Real> values) {
    return Tensor({values.size()}, std::vector<Real>(values));
}

Tensor Tensor::reshaped(Shape shape) const {
    require(shape_numel(shape) == data_.size(), ErrorKind::ShapeMismatch,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::rows(std::size_t start, std::size_t count) const {
    require_rank(*this, 2, "rows");
    require(start + count <= shape_[0], ErrorKind::ShapeMismatch, "row slice out of range");
    const std::size_t w = shape_[1];
    return Tensor({count, w}, std::vector<Real>(data_.begin() + static_cast<std::ptrdiff_t>(start * w),
                                                 data_.begin() + static_cast<std::ptrdiff_t>((start + count) * w)));
}

Tensor Tensor::transposed() const {
    require_rank(*this, 2, "transposed");
    const std::size_t r = shape_[0], c = shape_[1];
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data_[j * r + i] = data_[i * c + j];
    return out;
}

bool Tensor::all_finite() const noexcept {
    for (Real v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Real Tensor::item() const {
    require(data_.size() == 1, ErrorKind::ShapeMismatch, "item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

void Tensor::fill(Real value) {
    for (auto& v : data_) v = value;
}

Tensor& Tensor::operator+=(const Tensor& other) {
    require(other.shape_ == shape_, ErrorKind::ShapeMismatch,
            "+= between " + shape_str(shape_) + " and " + shape_str(other.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(Real)) == 0;
}

Real max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), ErrorKind::ShapeMismatch,
            "max_abs_diff between " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    Real m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
    if (t.shape() != expected) {
        fail(ErrorKind::ShapeMismatch,
             std::string(what) + ": expected " + shape_str(expected) + ", got " + shape_str(t.shape()));
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        fail(ErrorKind::ShapeMismatch, std::string(what) + ": expected rank " + std::to_string(rank) +
                                           ", got " + shape_str(t.shape()));
    }
}

}  // namespace tsmamba
