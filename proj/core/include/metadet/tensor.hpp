#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace metadet {

// Dense row-major tensor. Spatial maps use channel-last {H, W, C} layout, so
// the per-position channel vector is contiguous; matrices are {rows, cols};
// vectors {n}; scalars {1}.
//
// T is float for training runs and double for finite-difference gradient
// checks, where 32-bit round-off would drown the signal being measured.
template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
    data.assign(size_t(count(shape)), T(0));
  }
  TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (int64_t(data.size()) != count(shape))
      throw std::invalid_argument("tensor: data length does not match shape");
  }

  static int64_t count(const std::vector<int>& s) {
    if (s.empty()) throw std::invalid_argument("tensor: empty shape");
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }

  static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }
  static TensorT full(std::vector<int> s, T v) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }
  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  int64_t size() const { return int64_t(data.size()); }
  int dim(int i) const { return shape.at(size_t(i)); }
  int ndim() const { return int(shape.size()); }

  T& operator[](int64_t i) { return data[size_t(i)]; }
  const T& operator[](int64_t i) const { return data[size_t(i)]; }

  // {H,W,C} accessor.
  T& at3(int h, int w, int c) {
    return data[size_t((int64_t(h) * shape[1] + w) * shape[2] + c)];
  }
  const T& at3(int h, int w, int c) const {
    return data[size_t((int64_t(h) * shape[1] + w) * shape[2] + c)];
  }
  // {rows,cols} accessor.
  T& at2(int i, int j) { return data[size_t(int64_t(i) * shape[1] + j)]; }
  const T& at2(int i, int j) const { return data[size_t(int64_t(i) * shape[1] + j)]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }
  bool all_finite() const;

  std::string shape_str() const {
    std::string s = "{";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "}";
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

extern template struct TensorT<float>;
extern template struct TensorT<double>;

}  // namespace metadet
