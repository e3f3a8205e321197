#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "protsi/error.hpp"

namespace protsi {

// All dense math goes through Eigen. Tensor values are stored flat in
// row-major order; rank-2 tensors map onto this row-major matrix type.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// A dense 64-bit float tensor of rank 1 or 2. Scalars are shape {1}.
class Tensor {
 public:
  Tensor() = default;

  static Tensor scalar(double v) {
    Tensor t;
    t.shape_ = {1};
    t.data_ = Vector::Constant(1, v);
    return t;
  }

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = Vector::Zero(count(t.shape_));
    return t;
  }

  static Tensor from_vector(Vector v) {
    Tensor t;
    t.shape_ = {static_cast<int>(v.size())};
    t.data_ = std::move(v);
    return t;
  }

  static Tensor from_values(std::vector<double> v) {
    Tensor t;
    t.shape_ = {static_cast<int>(v.size())};
    t.data_ = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    return t;
  }

  static Tensor from_matrix(const Matrix& m) {
    Tensor t;
    t.shape_ = {static_cast<int>(m.rows()), static_cast<int>(m.cols())};
    t.data_ = Eigen::Map<const Vector>(m.data(), m.size());
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Eigen::Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }
  bool is_scalar() const { return rank() == 1 && shape_[0] == 1; }

  int rows() const {
    require_rank(2, "rows");
    return shape_[0];
  }
  int cols() const {
    require_rank(2, "cols");
    return shape_[1];
  }
  int length() const {
    require_rank(1, "length");
    return shape_[0];
  }

  double& operator[](Eigen::Index i) { return data_[i]; }
  double operator[](Eigen::Index i) const { return data_[i]; }

  double scalar_value() const {
    if (!is_scalar()) throw UsageError("Tensor: scalar_value on shape " + shape_str());
    return data_[0];
  }

  // Flat views; vec() is the natural view for rank-1 tensors and the
  // row-major flattening otherwise.
  Eigen::Map<Vector> vec() { return {data_.data(), data_.size()}; }
  Eigen::Map<const Vector> vec() const { return {data_.data(), data_.size()}; }
  Eigen::Map<Eigen::ArrayXd> arr() { return {data_.data(), data_.size()}; }
  Eigen::Map<const Eigen::ArrayXd> arr() const { return {data_.data(), data_.size()}; }

  Eigen::Map<Matrix> mat() {
    require_rank(2, "mat");
    return {data_.data(), shape_[0], shape_[1]};
  }
  Eigen::Map<const Matrix> mat() const {
    require_rank(2, "mat");
    return {data_.data(), shape_[0], shape_[1]};
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const { return data_.allFinite(); }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i > 0) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  static Eigen::Index count(const std::vector<int>& shape) {
    if (shape.empty()) throw UsageError("Tensor: empty shape");
    Eigen::Index n = 1;
    for (int d : shape) {
      if (d <= 0) throw UsageError("Tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }

  void require_rank(int r, const char* what) const {
    if (rank() != r)
      throw UsageError(std::string("Tensor: ") + what + " requires rank " + std::to_string(r) +
                       ", shape is " + shape_str());
  }

  std::vector<int> shape_;
  Vector data_;
};

}  // namespace protsi
