#pragma once

#include <cstddef>
#include <numeric>
#include <vector>

#include "bsh/common.hpp"

namespace bsh {

// Dense row-major N-d array. Training and verification run the double
// instantiation; float is the fast storage mode.
template <class T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> shp, T fill = T(0))
      : shape(std::move(shp)), data(checked_numel(shape), fill) {}

  static TensorT zeros(std::vector<int> shp) { return TensorT(std::move(shp)); }
  static TensorT full(std::vector<int> shp, T v) { return TensorT(std::move(shp), v); }
  static TensorT scalar(T v) { return TensorT({1}, v); }

  size_t numel() const { return data.size(); }
  int rank() const { return int(shape.size()); }
  int dim(int i) const { return shape[size_t(i)]; }
  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator()(int i) { return data[size_t(i)]; }
  T operator()(int i) const { return data[size_t(i)]; }
  T& operator()(int i, int j) { return data[size_t(i) * shape[1] + size_t(j)]; }
  T operator()(int i, int j) const { return data[size_t(i) * shape[1] + size_t(j)]; }
  T& operator()(int i, int j, int k) {
    return data[(size_t(i) * shape[1] + size_t(j)) * shape[2] + size_t(k)];
  }
  T operator()(int i, int j, int k) const {
    return data[(size_t(i) * shape[1] + size_t(j)) * shape[2] + size_t(k)];
  }
  T& operator()(int i, int j, int k, int l) {
    return data[((size_t(i) * shape[1] + size_t(j)) * shape[2] + size_t(k)) * shape[3] +
                size_t(l)];
  }
  T operator()(int i, int j, int k, int l) const {
    return data[((size_t(i) * shape[1] + size_t(j)) * shape[2] + size_t(k)) * shape[3] +
                size_t(l)];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

 private:
  static size_t checked_numel(const std::vector<int>& shp) {
    size_t n = 1;
    for (int d : shp) {
      if (d <= 0) throw numeric_error("tensor dim must be positive");
      n *= size_t(d);
    }
    return n;
  }
};

using Tensor = TensorT<double>;
using Tensor32 = TensorT<float>;

}  // namespace bsh
