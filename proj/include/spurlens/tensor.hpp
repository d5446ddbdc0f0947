#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spurlens/error.hpp"

namespace spurlens {

using Index = std::int64_t;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index element_count(const Shape& shape);

template <class Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major n-dimensional array. A plain value type: copying copies
/// the data. Gradients live on the tape (see autodiff.hpp), not here.
template <class Scalar>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(static_cast<std::size_t>(element_count(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (static_cast<Index>(data_.size()) != element_count(shape_)) {
      throw DimensionError("tensor data has " + std::to_string(data_.size()) +
                           " elements but shape " + shape_string(shape_) + " needs " +
                           std::to_string(element_count(shape_)));
    }
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, std::vector<Scalar>{v}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const Scalar& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  auto array() { return Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(data_.data(), size()); }
  auto array() const {
    return Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(data_.data(), size());
  }

  /// Row-major matrix view over the whole buffer.
  auto matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return Eigen::Map<RowMatrix<Scalar>>(data_.data(), rows, cols);
  }
  auto matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return Eigen::Map<const RowMatrix<Scalar>>(data_.data(), rows, cols);
  }

  /// Same data, new shape with the same element count.
  Tensor reshaped(Shape shape) const {
    Tensor out;
    out.shape_ = std::move(shape);
    validate_shape(out.shape_);
    if (element_count(out.shape_) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(out.shape_));
    }
    out.data_ = data_;
    return out;
  }

  template <class Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return Tensor<Other>(shape_, std::move(out));
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor& other) const = default;

 private:
  static void validate_shape(const Shape& shape) {
    for (Index d : shape) {
      if (d <= 0) throw DimensionError("tensor dims must be positive, got " + shape_string(shape));
    }
  }

  void check_view(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw DimensionError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                           " over tensor of shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace spurlens
