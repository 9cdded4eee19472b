#pragma once

#include <Eigen/Core>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "acfpipe/errors.hpp"

namespace acfpipe::nn {

// Dense n-dimensional array in row-major flat storage. Rank is dynamic; the
// model code only uses ranks 1, 2 and 4 ([B,C,H,W] for conv stages, [B,F] for
// dense stages).
template <typename Scalar>
struct Tensor {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap =
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  std::vector<Eigen::Index> shape;
  Array values;

  Tensor() = default;
  explicit Tensor(std::vector<Eigen::Index> s) : shape(std::move(s)) {
    values = Array::Zero(numel_of(shape));
  }

  static Eigen::Index numel_of(const std::vector<Eigen::Index>& s) {
    Eigen::Index n = 1;
    for (auto d : s) {
      if (d < 0) throw ShapeError("negative tensor dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<Eigen::Index> s) { return Tensor(std::move(s)); }

  Eigen::Index numel() const { return values.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  Eigen::Index dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  // Product of dimensions after the first; the flat storage of [d0, rest...]
  // is the row-major matrix d0 x rest.
  Eigen::Index inner() const {
    if (shape.empty()) return 1;
    return numel() / (shape[0] == 0 ? 1 : shape[0]);
  }

  MatrixMap matrix() {
    if (rank() < 1) throw ShapeError("matrix view of rank-0 tensor");
    return MatrixMap(values.data(), shape[0], inner());
  }
  ConstMatrixMap matrix() const {
    if (rank() < 1) throw ShapeError("matrix view of rank-0 tensor");
    return ConstMatrixMap(values.data(), shape[0], inner());
  }

  Tensor reshaped(std::vector<Eigen::Index> s) const {
    if (numel_of(s) != numel()) throw ShapeError("reshape changes element count");
    Tensor out;
    out.shape = std::move(s);
    out.values = values;
    return out;
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  std::string shape_string() const {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(shape[i]);
    }
    return out + "]";
  }
};

template <typename Scalar>
Tensor<Scalar> tensor_from(std::vector<Eigen::Index> shape, std::initializer_list<Scalar> vals) {
  Tensor<Scalar> t(std::move(shape));
  if (static_cast<Eigen::Index>(vals.size()) != t.numel()) {
    throw ShapeError("initializer length does not match shape");
  }
  Eigen::Index i = 0;
  for (Scalar v : vals) t.values[i++] = v;
  return t;
}

}  // namespace acfpipe::nn
