#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mednc/core/errors.hpp"

namespace mednc {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense n-dimensional array in row-major order with an optional gradient
/// buffer of the same shape.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using VectorType = Vector<Scalar>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    values_ = VectorType::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, VectorType values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_extents();
    if (shape_size(shape_) != values_.size()) {
      throw DimensionError("tensor shape " + shape_string(shape_) + " holds " +
                           std::to_string(shape_size(shape_)) + " values, got " +
                           std::to_string(values_.size()));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), from_list(values)) {}

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.values_.setConstant(value);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const noexcept { return values_.size(); }

  VectorType& values() noexcept { return values_; }
  const VectorType& values() const noexcept { return values_; }
  Scalar* data() noexcept { return values_.data(); }
  const Scalar* data() const noexcept { return values_.data(); }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  /// Row-major view with the leading extent as rows, everything else as columns.
  MatrixMap matrix() { return MatrixMap(values_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(values_.data(), rows(), cols()); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  bool has_grad() const noexcept { return grad_.has_value(); }
  const VectorType& grad() const {
    if (!grad_) throw StateError("tensor has no gradient");
    return *grad_;
  }
  VectorType& grad() {
    if (!grad_) throw StateError("tensor has no gradient");
    return *grad_;
  }
  void zero_grad() { grad_ = VectorType::Zero(values_.size()); }
  void clear_grad() { grad_.reset(); }

  bool all_finite() const { return values_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, values_.template cast<Other>());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_.size() == b.values_.size() &&
           (a.values_.array() == b.values_.array()).all();
  }

 private:
  static VectorType from_list(std::initializer_list<Scalar> list) {
    VectorType v(static_cast<Index>(list.size()));
    Index i = 0;
    for (Scalar x : list) v[i++] = x;
    return v;
  }

  void check_extents() const {
    for (Index e : shape_) {
      if (e < 0) throw DimensionError("negative extent in shape " + shape_string(shape_));
    }
  }

  Index rows() const { return shape_.empty() ? 1 : shape_[0]; }
  Index cols() const { return rows() == 0 ? 0 : size() / rows(); }

  Shape shape_;
  VectorType values_;
  std::optional<VectorType> grad_;
};

using Tensord = Tensor<double>;
using Tensorf = Tensor<float>;

/// Gathers the listed leading-axis rows, in the order given.
template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& t, const std::vector<Index>& rows) {
  Shape shape = t.shape();
  const Index stride = shape.empty() || shape[0] == 0 ? 0 : t.size() / shape[0];
  shape[0] = static_cast<Index>(rows.size());
  Tensor<Scalar> out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.values().segment(static_cast<Index>(r) * stride, stride) =
        t.values().segment(rows[r] * stride, stride);
  }
  return out;
}

}  // namespace mednc
