#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "dtomo/common.hpp"

namespace dtomo {

/// Dense row-major array of 64-bit floats. Value semantics throughout; a
/// Tensor is immutable once it has been handed to the expression graph.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;

  Tensor(std::vector<int64_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("Tensor: shape/data size mismatch");
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int64_t> s) {
    const int64_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
  }

  static Tensor full(std::vector<int64_t> s, double v) {
    const int64_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor from(std::initializer_list<double> v) {
    return Tensor({static_cast<int64_t>(v.size())}, std::vector<double>(v));
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t ndim() const { return static_cast<int64_t>(shape.size()); }
  int64_t dim(int64_t i) const { return shape[static_cast<size_t>(i)]; }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 2-D access
  double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
  double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const { return dtomo::all_finite(data); }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

}  // namespace dtomo
