// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Straight-line reference implementations used as independent oracles.
// These are written directly from the definitions with plain loops and
// must stay independent of the library's implementation paths.
#pragma once

#include <cmath>
#include <cstddef>
#include <set>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;  // row-major dense matrix

inline Mat make(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c = make(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) acc += a[i][k] * b[k][j];
      c[i][j] = acc;
    }
  return c;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
inline double swish(double z) { return z * sigmoid(z); }

/// ReLU + RMSNorm router, one token at a time.
inline Mat router_relu_rmsnorm(const Mat& x, const Mat& w_router,
                               const std::vector<double>& gain, double eps) {
  const std::size_t ne = w_router[0].size();
  Mat a = make(x.size(), ne);
  for (std::size_t t = 0; t < x.size(); ++t) {
    std::vector<double> a1(ne);
    double ms = 0.0;
    for (std::size_t e = 0; e < ne; ++e) {
      double acc = 0.0;
      for (std::size_t d = 0; d < x[t].size(); ++d) acc += x[t][d] * w_router[d][e];
      a1[e] = acc > 0.0 ? acc : 0.0;
      ms += a1[e] * a1[e];
    }
    ms /= static_cast<double>(ne);
    for (std::size_t e = 0; e < ne; ++e) a[t][e] = gain[e] * a1[e] / std::sqrt(ms + eps);
  }
  return a;
}

inline Mat expert_nongated(const Mat& x, const Mat& w_up, const Mat& w_down) {
  Mat mid = matmul(x, w_up);
  for (auto& row : mid)
    for (auto& v : row) v = swish(v);
  return matmul(mid, w_down);
}

inline Mat expert_gated(const Mat& x, const Mat& w_gate, const Mat& w_up, const Mat& w_down) {
  Mat g = matmul(x, w_gate);
  Mat u = matmul(x, w_up);
  for (std::size_t r = 0; r < g.size(); ++r)
    for (std::size_t c = 0; c < g[r].size(); ++c) g[r][c] = swish(g[r][c]) * u[r][c];
  return matmul(g, w_down);
}

/// Full MoE summation: y_t = sum_i a[t][i] * expert_i(x_t).
inline Mat ffn_dense(const Mat& x, const Mat& a, const std::vector<Mat>& w_up,
                     const std::vector<Mat>& w_down) {
  Mat y = make(x.size(), w_down[0][0].size());
  for (std::size_t i = 0; i < w_up.size(); ++i) {
    const Mat e = expert_nongated(x, w_up[i], w_down[i]);
    for (std::size_t t = 0; t < x.size(); ++t)
      for (std::size_t c = 0; c < y[t].size(); ++c) y[t][c] += a[t][i] * e[t][c];
  }
  return y;
}

// -- set-arithmetic sparsity oracles over boolean masks ----------------------

using Mask = std::vector<std::vector<bool>>;  // [tokens][experts]

inline double tls(const Mask& m) {
  double inactive = 0.0;
  for (const auto& row : m)
    for (const bool b : row)
      if (!b) inactive += 1.0;
  return inactive / (static_cast<double>(m.size()) * static_cast<double>(m[0].size()));
}

inline double cls(const Mask& m, std::size_t len) {
  const std::size_t chunks = m.size() / len;
  double acc = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    std::size_t inactive = 0;
    for (std::size_t e = 0; e < m[0].size(); ++e) {
      bool any = false;
      for (std::size_t k = c * len; k < (c + 1) * len; ++k) any = any || m[k][e];
      if (!any) ++inactive;
    }
    acc += static_cast<double>(inactive) / static_cast<double>(m[0].size());
  }
  return acc / static_cast<double>(chunks);
}

inline std::set<std::size_t> active_set(const Mask& m, std::size_t token) {
  std::set<std::size_t> s;
  for (std::size_t e = 0; e < m[token].size(); ++e)
    if (m[token][e]) s.insert(e);
  return s;
}

inline bool reuse(const Mask& m, double& out) {
  double acc = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k + 1 < m.size(); ++k) {
    const auto s1 = active_set(m, k);
    if (s1.empty()) continue;
    const auto s2 = active_set(m, k + 1);
    std::size_t inter = 0;
    for (const auto e : s1)
      if (s2.count(e)) ++inter;
    acc += static_cast<double>(inter) / static_cast<double>(s1.size());
    ++counted;
  }
  if (counted == 0) return false;
  out = acc / static_cast<double>(counted);
  return true;
}

inline double union_sparsity(const Mask& m) {
  std::set<std::size_t> u;
  for (std::size_t k = 0; k < m.size(); ++k)
    for (const auto e : active_set(m, k)) u.insert(e);
  return 1.0 - static_cast<double>(u.size()) / static_cast<double>(m[0].size());
}

// -- objective oracles --------------------------------------------------------

inline double bce(double p, double q) {
  const double pc = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
  return -(q * std::log(pc) + (1.0 - q) * std::log(1.0 - pc));
}

/// Locality loss over one sequence laid out as rows of a0.
inline double al_loss(const Mat& a0, double alpha) {
  const std::size_t n = a0.size(), ne = a0[0].size();
  if (n < 2) return 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k + 1 < n; ++k)
    for (std::size_t e = 0; e < ne; ++e)
      acc += bce(sigmoid(alpha * a0[k][e]), sigmoid(alpha * a0[k + 1][e]));
  return acc / (static_cast<double>(n - 1) * static_cast<double>(ne));
}

/// Chunk sparsification loss treating the whole matrix as one chunk.
inline double cs_loss(const Mat& a1) {
  const std::size_t n = a1.size(), ne = a1[0].size();
  Mat p = make(n, ne);
  for (std::size_t k = 0; k < n; ++k) {
    double s = 0.0;
    for (std::size_t e = 0; e < ne; ++e) s += a1[k][e];
    if (s > 0.0)
      for (std::size_t e = 0; e < ne; ++e) p[k][e] = a1[k][e] / s;
  }
  double acc = 0.0;
  for (std::size_t e = 0; e < ne; ++e) {
    double logq = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      logq += std::log(1.0 - std::min(p[k][e], 1.0 - 1e-6));
    acc += 1.0 - std::exp(logq);
  }
  return acc / static_cast<double>(ne);
}

inline double load_balance(const Mat& a1) {
  const std::size_t n = a1.size(), ne = a1[0].size();
  std::vector<double> f(ne, 0.0), pm(ne, 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    double s = 0.0;
    for (std::size_t e = 0; e < ne; ++e) s += a1[k][e];
    for (std::size_t e = 0; e < ne; ++e) {
      if (a1[k][e] > 0.0) {
        f[e] += 1.0;
        total += 1.0;
      }
      if (s > 0.0) pm[e] += a1[k][e] / s / static_cast<double>(n);
    }
  }
  if (total == 0.0) return 0.0;
  double acc = 0.0;
  for (std::size_t e = 0; e < ne; ++e) acc += (f[e] / total) * pm[e];
  return acc * static_cast<double>(ne);
}

/// Straight-line replay of the adaptive factor schedule.
inline double scheduler_replay(double lambda0, std::size_t n_st, std::size_t n_adj,
                               double gamma_min, const std::vector<double>& losses) {
  double lambda = lambda0;
  std::vector<double> prev, cur;
  for (std::size_t t = 0; t < losses.size(); ++t) {
    cur.push_back(losses[t]);
    if (cur.size() == n_adj) {
      const std::size_t step = t + 1;
      if (step <= n_st) {
        lambda = lambda0;
      } else if (!prev.empty()) {
        double sp = 0.0, sc = 0.0;
        for (const double v : prev) sp += v;
        for (const double v : cur) sc += v;
        if (sp != 0.0) {
          const double gamma = sc / sp;
          lambda *= gamma <= 1.0 ? gamma : std::max(gamma_min, gamma);
        }
      }
      prev = cur;
      cur.clear();
    }
  }
  return lambda;
}

}  // namespace oracle
