#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace flowtok {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

/// Dense row-major tensor with dynamic rank.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel_of(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
      throw std::invalid_argument("tensor: data size does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool empty() const { return data.empty(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  /// Row count when viewed as a matrix whose last axis is the column axis.
  std::size_t rows_flat() const {
    if (shape.empty()) return 0;
    return numel() / shape.back();
  }
  std::size_t cols_flat() const { return shape.empty() ? 0 : shape.back(); }

  Tensor reshaped(Shape s) const {
    if (numel_of(s) != numel())
      throw std::invalid_argument("reshape: numel mismatch " + shape_str(shape) + " -> " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<RowMat<T>> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return Eigen::Map<RowMat<T>>(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
Eigen::Map<const RowMat<T>> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const RowMat<T>>(t.ptr(), static_cast<Eigen::Index>(rows),
                                     static_cast<Eigen::Index>(cols));
}

/// View the last axis as columns and everything before it as rows.
template <typename T>
Eigen::Map<RowMat<T>> as_matrix(Tensor<T>& t) {
  return as_matrix(t, t.rows_flat(), t.cols_flat());
}

template <typename T>
Eigen::Map<const RowMat<T>> as_matrix(const Tensor<T>& t) {
  return as_matrix(t, t.rows_flat(), t.cols_flat());
}

template <typename T>
void check_shape(const Tensor<T>& t, const Shape& expect, const char* what) {
  if (t.shape != expect)
    throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(expect) +
                                ", got " + shape_str(t.shape));
}

}  // namespace flowtok
