#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tdm {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major n-dimensional array backed by an Eigen column array.
///
/// Values are stored contiguously with the last axis varying fastest, so a
/// BxCxHxW batch can be viewed per instance as a C x (H*W) row-major matrix
/// without copying (see matrix()).
template <typename Scalar_>
class BasicTensor {
public:
    using Scalar = Scalar_;
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MatrixMap = Eigen::Map<RowMatrix>;
    using ConstMatrixMap = Eigen::Map<const RowMatrix>;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape) : shape_(std::move(shape)), values_(Array::Zero(numel(shape_))) {}

    BasicTensor(Shape shape, Array values) : shape_(std::move(shape)), values_(std::move(values)) {
        if (numel(shape_) != values_.size()) {
            throw ShapeError("tensor shape " + shape_str(shape_) + " holds " + std::to_string(numel(shape_)) +
                             " values, got " + std::to_string(values_.size()));
        }
    }

    BasicTensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
        values_.resize(static_cast<Index>(values.size()));
        Index i = 0;
        for (Scalar v : values) values_[i++] = v;
        if (numel(shape_) != values_.size()) {
            throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " +
                             std::to_string(values.size()) + " values");
        }
    }

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
    /// Values are unspecified; for outputs the caller overwrites in full.
    static BasicTensor uninitialized(Shape shape) {
        const Index n = numel(shape);
        return BasicTensor(std::move(shape), Array(n));
    }
    static BasicTensor constant(Shape shape, Scalar value) {
        const Index n = numel(shape);
        return BasicTensor(std::move(shape), Array::Constant(n, value));
    }
    static BasicTensor ones(Shape shape) { return constant(std::move(shape), Scalar(1)); }

    const Shape& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    Index size() const { return values_.size(); }
    bool empty() const { return shape_.empty() && values_.size() == 0; }

    Scalar* data() { return values_.data(); }
    const Scalar* data() const { return values_.data(); }
    Array& array() { return values_; }
    const Array& array() const { return values_; }

    Scalar& operator[](Index i) { return values_[i]; }
    Scalar operator[](Index i) const { return values_[i]; }

    template <typename... I>
    Scalar& at(I... idx) {
        return values_[offset({static_cast<Index>(idx)...})];
    }
    template <typename... I>
    Scalar at(I... idx) const {
        return values_[offset({static_cast<Index>(idx)...})];
    }

    Index offset(std::initializer_list<Index> idx) const {
        if (static_cast<Index>(idx.size()) != rank()) {
            throw ShapeError("index of rank " + std::to_string(idx.size()) + " into tensor " + shape_str(shape_));
        }
        Index off = 0;
        std::size_t axis = 0;
        for (Index i : idx) off = off * shape_[axis++] + i;
        return off;
    }

    /// Row-major matrix view of `rows` x `cols` values starting at `start`.
    MatrixMap matrix(Index rows, Index cols, Index start = 0) {
        return MatrixMap(values_.data() + start, rows, cols);
    }
    ConstMatrixMap matrix(Index rows, Index cols, Index start = 0) const {
        return ConstMatrixMap(values_.data() + start, rows, cols);
    }

    BasicTensor reshaped(Shape shape) const {
        if (numel(shape) != size()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return BasicTensor(std::move(shape), values_);
    }

    bool all_finite() const { return values_.isFinite().all(); }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && (a.values_ == b.values_).all();
    }

private:
    Shape shape_;
    Array values_;
};

using Tensor = BasicTensor<double>;

}  // namespace tdm
