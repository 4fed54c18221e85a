#pragma once

#include <Eigen/Dense>

#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace star {

// Desk-scale sizes, gradient checks need the precision: 64-bit reals everywhere.
using Scalar = double;
using Index = Eigen::Index;

using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

using Shape = std::vector<Index>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense value of rank 0 (scalar), 1 (vector) or 2 (matrix, row-major storage).
class Tensor {
 public:
  Tensor() : shape_{}, data_(1) { data_[0] = 0.0; }

  static Tensor scalar(Scalar v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = Array::Zero(num_elements(t.shape_));
    return t;
  }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t = zeros(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static Tensor from_vector(const Vector& v) {
    Tensor t;
    t.shape_ = {v.size()};
    t.data_ = v.array();
    return t;
  }

  static Tensor from_matrix(const Matrix& m) {
    Tensor t;
    t.shape_ = {m.rows(), m.cols()};
    t.data_.resize(m.size());
    Eigen::Map<Matrix>(t.data_.data(), m.rows(), m.cols()) = m;
    return t;
  }

  static Tensor one_hot(Index size, Index hot) {
    if (hot < 0 || hot >= size) throw std::invalid_argument("one_hot: index out of range");
    Tensor t = zeros({size});
    t.data_[hot] = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Index rows() const { return rank() == 2 ? shape_[0] : size(); }
  Index cols() const { return rank() == 2 ? shape_[1] : 1; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Array& array() { return data_; }
  const Array& array() const { return data_; }

  // Flat view over the row-major storage, valid for any rank.
  Eigen::Map<const Vector> vec() const { return {data_.data(), data_.size()}; }
  Eigen::Map<Vector> vec() { return {data_.data(), data_.size()}; }

  Eigen::Map<const Matrix> mat() const {
    require_rank(2, "mat");
    return {data_.data(), shape_[0], shape_[1]};
  }
  Eigen::Map<Matrix> mat() {
    require_rank(2, "mat");
    return {data_.data(), shape_[0], shape_[1]};
  }

  Scalar value() const {
    require_rank(0, "value");
    return data_[0];
  }

  Scalar operator[](Index i) const { return data_[i]; }
  Scalar& operator[](Index i) { return data_[i]; }

  bool all_finite() const { return data_.isFinite().all(); }

  bool bytes_equal(const Tensor& o) const {
    return shape_ == o.shape_ &&
           std::memcmp(data_.data(), o.data_.data(), sizeof(Scalar) * data_.size()) == 0;
  }

  static Index num_elements(const Shape& s) {
    Index n = 1;
    for (Index e : s) {
      if (e < 0) throw std::invalid_argument("tensor shape with negative extent");
      n *= e;
    }
    return n;
  }

 private:
  void require_rank(Index r, const char* what) const {
    if (rank() != r)
      throw std::logic_error(std::string("tensor ") + what + ": rank " + std::to_string(rank()) +
                             " tensor, shape " + shape_str(shape_));
  }

  Shape shape_;
  Array data_;
};

}  // namespace star
