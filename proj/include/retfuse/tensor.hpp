#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "retfuse/common.hpp"
#include "retfuse/rng.hpp"

namespace retfuse::nn {

// Dense NCHW tensor. Scalars live as 1x1x1x1.
template <typename T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_) {
    require(n_ >= 1 && c_ >= 1 && h_ >= 1 && w_ >= 1, ErrorKind::ShapeError,
            "tensor dims must be positive");
    v.assign(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill);
  }

  static Tensor scalar(T x) {
    Tensor t(1, 1, 1, 1);
    t.v[0] = x;
    return t;
  }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.n, o.c, o.h, o.w); }

  static Tensor uniform(int n_, int c_, int h_, int w_, Rng& rng, T lo, T hi) {
    Tensor t(n_, c_, h_, w_);
    for (auto& x : t.v) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool empty() const { return v.empty(); }
  std::size_t numel() const { return v.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& at(int in, int ic, int iy, int ix) {
    return v[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  const T& at(int in, int ic, int iy, int ix) const {
    return v[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  std::string shape_str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" +
           std::to_string(h) + "x" + std::to_string(w);
  }

  void add_(const Tensor& o) {
    require(same_shape(o), ErrorKind::ShapeError,
            "add_: shape mismatch " + shape_str() + " vs " + o.shape_str());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
  }

  T min_value() const {
    T m = v[0];
    for (T x : v) m = std::min(m, x);
    return m;
  }
  T max_value() const {
    T m = v[0];
    for (T x : v) m = std::max(m, x);
    return m;
  }
  double abs_max() const {
    double m = 0;
    for (T x : v) m = std::max(m, std::abs(static_cast<double>(x)));
    return m;
  }
  bool all_finite() const {
    for (T x : v) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(n, c, h, w);
    for (std::size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<U>(v[i]);
    return t;
  }
};

}  // namespace retfuse::nn
