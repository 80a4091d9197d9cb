// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "chunkmoe/error.hpp"

namespace chunkmoe {

/// Dense row-major 2-D tensor. The only shape the library needs.
///
/// Every primitive below uses a fixed summation order (k increasing per
/// output element), so repeated evaluation is bit-reproducible regardless
/// of how callers tile or thread around it.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, T{0}) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    check_contract(data_.size() == rows_ * cols_, "tensor: data length != rows*cols");
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor(rows, cols); }

  static Tensor full(std::size_t rows, std::size_t cols, T value) {
    Tensor t(rows, cols);
    for (auto& v : t.data_) v = value;
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  T* row(std::size_t r) { return data_.data() + r * cols_; }
  const T* row(std::size_t r) const { return data_.data() + r * cols_; }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(T v) {
    for (auto& x : data_) x = v;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* where) {
  for (const T& v : t.flat()) {
    if (!std::isfinite(v)) throw NumericError(std::string(where) + ": non-finite value");
  }
}

// ---------------------------------------------------------------------------
// Matrix products. ikj / dot orderings keep each output element's summation
// order fixed (k increasing), which is what makes sparse-vs-dense equivalence
// tests exact where loop orders coincide.
// ---------------------------------------------------------------------------

/// C = A * B.  A: [m x k], B: [k x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_contract(a.cols() == b.rows(), "matmul: a.cols != b.rows");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c.row(i);
    const T* ai = a.row(i);
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T aik = ai[kk];
      const T* bk = b.row(kk);
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

/// C = A * B^T.  A: [m x k], B: [n x k].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  check_contract(a.cols() == b.cols(), "matmul_nt: inner dims differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<T> c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a.row(i);
    T* ci = c.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b.row(j);
      T acc{0};
      for (std::size_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
      ci[j] = acc;
    }
  }
  return c;
}

/// C = A^T * B.  A: [k x m], B: [k x n].
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  check_contract(a.rows() == b.rows(), "matmul_tn: inner dims differ");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor<T> c(m, n);
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* ak = a.row(kk);
    const T* bk = b.row(kk);
    for (std::size_t i = 0; i < m; ++i) {
      const T aki = ak[i];
      T* ci = c.row(i);
      for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  Tensor<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise primitives.
// ---------------------------------------------------------------------------

namespace detail {
template <typename T, typename F>
Tensor<T> map(const Tensor<T>& t, F&& f, const char* where) {
  Tensor<T> out(t.rows(), t.cols());
  const auto in = t.flat();
  auto o = out.flat();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  check_finite(out, where);
  return out;
}
}  // namespace detail

template <typename T>
T sigmoid_scalar(T z) {
  // Split on sign to avoid exp overflow.
  if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
  const T e = std::exp(z);
  return e / (T{1} + e);
}

template <typename T>
T swish_scalar(T z) {
  return z * sigmoid_scalar(z);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& t) {
  return detail::map(t, [](T v) { return v > T{0} ? v : T{0}; }, "relu");
}

template <typename T>
Tensor<T> swish(const Tensor<T>& t) {
  return detail::map(t, [](T v) { return swish_scalar(v); }, "swish");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& t) {
  return detail::map(t, [](T v) { return sigmoid_scalar(v); }, "sigmoid");
}

template <typename T>
Tensor<T> exp(const Tensor<T>& t) {
  return detail::map(t, [](T v) { return std::exp(v); }, "exp");
}

inline constexpr double kLogClampFloor = 1e-7;

/// log with inputs clamped up to `floor` first.
template <typename T>
Tensor<T> log(const Tensor<T>& t, T floor = T(kLogClampFloor)) {
  check_contract(floor > T{0}, "log: clamp floor must be > 0");
  return detail::map(t, [floor](T v) { return std::log(v < floor ? floor : v); }, "log");
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& t, T lo, T hi) {
  check_contract(lo <= hi, "clamp: lo > hi");
  return detail::map(t, [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); }, "clamp");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_contract(a.same_shape(b), "add: shape mismatch");
  Tensor<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.flat()[i] = a.flat()[i] + b.flat()[i];
  return out;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  check_contract(a.same_shape(b), "hadamard: shape mismatch");
  Tensor<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.flat()[i] = a.flat()[i] * b.flat()[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.flat()[i] = a.flat()[i] * c;
  return out;
}

// ---------------------------------------------------------------------------
// RMSNorm.
// ---------------------------------------------------------------------------

inline constexpr double kRmsNormEps = 1e-6;

/// out_i = gain_i * v_i / sqrt(mean_j(v_j^2) + eps).  Zero inputs map to zero
/// outputs for any gain (support preservation).
template <typename T>
std::vector<T> rmsnorm(std::span<const T> v, std::span<const T> gain, T eps = T(kRmsNormEps)) {
  check_contract(v.size() == gain.size(), "rmsnorm: gain length != vector length");
  check_contract(eps > T{0}, "rmsnorm: eps must be > 0");
  T ms{0};
  for (T x : v) ms += x * x;
  ms /= static_cast<T>(v.size());
  const T inv = T{1} / std::sqrt(ms + eps);
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = gain[i] * v[i] * inv;
  return out;
}

/// Row-wise RMSNorm of a matrix with a shared per-column gain.
template <typename T>
Tensor<T> rmsnorm_rows(const Tensor<T>& x, std::span<const T> gain, T eps = T(kRmsNormEps)) {
  check_contract(gain.size() == x.cols(), "rmsnorm_rows: gain length != cols");
  check_contract(eps > T{0}, "rmsnorm_rows: eps must be > 0");
  Tensor<T> out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* in = x.row(r);
    T ms{0};
    for (std::size_t c = 0; c < x.cols(); ++c) ms += in[c] * in[c];
    ms /= static_cast<T>(x.cols());
    const T inv = T{1} / std::sqrt(ms + eps);
    T* o = out.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) o[c] = gain[c] * in[c] * inv;
  }
  return out;
}

/// Row-wise softmax (max-shifted).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* in = x.row(r);
    T mx = in[0];
    for (std::size_t c = 1; c < x.cols(); ++c) mx = std::max(mx, in[c]);
    T sum{0};
    T* o = out.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    const T inv = T{1} / sum;
    for (std::size_t c = 0; c < x.cols(); ++c) o[c] *= inv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random fills (seeded, engine-stable across platforms via explicit algebra).
// ---------------------------------------------------------------------------

/// Fan-in scaled gaussian init: zero mean, variance 1/fan_in.
template <typename T>
Tensor<T> randn_fanin(std::size_t rows, std::size_t cols, std::size_t fan_in,
                      std::mt19937_64& rng) {
  Tensor<T> t(rows, cols);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  for (auto& v : t.raw()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> randn(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev = 1.0) {
  Tensor<T> t(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.raw()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace chunkmoe
