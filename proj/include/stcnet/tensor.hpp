#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "stcnet/errors.hpp"

namespace stcnet {

// Dense row-major tensor; rank 1..4 in practice.
template <class S>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<S> v;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> sh) : shape(std::move(sh)), v(numel_of(shape)) {}
  Tensor(std::vector<int64_t> sh, S fill) : shape(std::move(sh)), v(numel_of(shape), fill) {}

  static int64_t numel_of(const std::vector<int64_t>& sh) {
    int64_t n = 1;
    for (int64_t d : sh) {
      if (d < 0) throw ShapeError("negative tensor dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  S* data() { return v.data(); }
  const S* data() const { return v.data(); }

  S& at(int64_t i) { return v[static_cast<size_t>(i)]; }
  S at(int64_t i) const { return v[static_cast<size_t>(i)]; }
  S& at(int64_t i, int64_t j) { return v[static_cast<size_t>(i * shape[1] + j)]; }
  S at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * shape[1] + j)]; }
  S& at(int64_t i, int64_t j, int64_t k) {
    return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  S at(int64_t i, int64_t j, int64_t k) const {
    return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  S& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return v[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }
  S at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return v[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (S x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out(shape);
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }
};

}  // namespace stcnet
