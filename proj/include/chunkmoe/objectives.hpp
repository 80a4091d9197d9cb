// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>

#include "chunkmoe/tape.hpp"
#include "chunkmoe/tensor.hpp"

namespace chunkmoe {

inline constexpr double kBceClamp = 1e-7;       // prediction clamp for the locality loss
inline constexpr double kChunkProbClamp = 1e-6; // p <= 1 - this before ln(1-p)
inline constexpr double kDefaultAlpha = 10.0;   // sigmoid sharpness

namespace detail {

/// Activation locality loss over neighbor-token pairs, with optional
/// gradient accumulation (dL/dA0 scaled by `upstream` added into *grad).
///
/// Rows are consecutive tokens; when the matrix stacks several sequences of
/// length seq_len, pairs never cross a sequence boundary. Prediction is the
/// current token, target the next; gradient flows through both unless
/// detach_target is set.
template <typename T>
double al_loss_core(const Tensor<T>& a0, double alpha, std::size_t seq_len, bool detach_target,
                    Tensor<T>* grad, T upstream) {
  const std::size_t n = a0.rows(), ne = a0.cols();
  check_contract(seq_len >= 1 && n % seq_len == 0, "al_loss: rows not a multiple of seq_len");
  check_contract(alpha > 0.0, "al_loss: alpha must be > 0");
  const std::size_t n_seq = n / seq_len;
  const std::size_t pairs = n_seq * (seq_len - 1);
  if (pairs == 0) return 0.0;

  const double lo = kBceClamp, hi = 1.0 - kBceClamp;
  const double w = 1.0 / (static_cast<double>(pairs) * static_cast<double>(ne));
  double loss = 0.0;
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t k = s * seq_len; k + 1 < (s + 1) * seq_len; ++k) {
      for (std::size_t i = 0; i < ne; ++i) {
        const double p = sigmoid_scalar(alpha * static_cast<double>(a0(k, i)));
        const double q = sigmoid_scalar(alpha * static_cast<double>(a0(k + 1, i)));
        const double pc = std::min(std::max(p, lo), hi);
        loss += -(q * std::log(pc) + (1.0 - q) * std::log(1.0 - pc));
        if (grad != nullptr) {
          if (p >= lo && p <= hi) {
            const double dpc = -q / pc + (1.0 - q) / (1.0 - pc);
            (*grad)(k, i) += static_cast<T>(upstream * w * dpc * alpha * p * (1.0 - p));
          }
          if (!detach_target) {
            const double dq = std::log((1.0 - pc) / pc);
            (*grad)(k + 1, i) += static_cast<T>(upstream * w * dq * alpha * q * (1.0 - q));
          }
        }
      }
    }
  }
  return loss * w;
}

/// Chunk sparsification loss over aligned disjoint chunks, with optional
/// gradient. Per token, p is the expert-normalized ReLU pattern (zero rows
/// stay zero); per chunk and expert, P_act = 1 - prod_k (1 - p_ik); the loss
/// averages P_act over experts and chunks.
template <typename T>
double cs_loss_core(const Tensor<T>& a1, std::size_t chunk_len, std::size_t seq_len,
                    Tensor<T>* grad, T upstream) {
  const std::size_t n = a1.rows(), ne = a1.cols();
  check_contract(chunk_len >= 1, "cs_loss: chunk_len must be >= 1");
  check_contract(seq_len >= 1 && n % seq_len == 0, "cs_loss: rows not a multiple of seq_len");
  for (const T v : a1.flat())
    check_contract(v >= T{0}, "cs_loss: negative entry in activation pattern");

  const std::size_t chunks_per_seq = seq_len / chunk_len;  // trailing partial chunk dropped
  const std::size_t n_seq = n / seq_len;
  const std::size_t n_chunks = n_seq * chunks_per_seq;
  if (n_chunks == 0) return 0.0;

  const double pmax = 1.0 - kChunkProbClamp;
  const double w = 1.0 / (static_cast<double>(n_chunks) * static_cast<double>(ne));
  std::vector<double> p(chunk_len * ne), srow(chunk_len), logq(ne);
  double loss = 0.0;
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t c = 0; c < chunks_per_seq; ++c) {
      const std::size_t base = s * seq_len + c * chunk_len;
      for (std::size_t k = 0; k < chunk_len; ++k) {
        double sum = 0.0;
        for (std::size_t i = 0; i < ne; ++i) sum += static_cast<double>(a1(base + k, i));
        srow[k] = sum;
        for (std::size_t i = 0; i < ne; ++i)
          p[k * ne + i] = sum > 0.0 ? static_cast<double>(a1(base + k, i)) / sum : 0.0;
      }
      for (std::size_t i = 0; i < ne; ++i) {
        double t = 0.0;
        for (std::size_t k = 0; k < chunk_len; ++k)
          t += std::log1p(-std::min(p[k * ne + i], pmax));
        logq[i] = t;
        loss += -std::expm1(t);  // P_act = 1 - exp(t)
      }
      if (grad != nullptr) {
        for (std::size_t k = 0; k < chunk_len; ++k) {
          if (srow[k] <= 0.0) continue;
          double dot = 0.0;
          std::vector<double> g(ne, 0.0);
          for (std::size_t i = 0; i < ne; ++i) {
            const double pik = p[k * ne + i];
            if (pik < pmax) {
              // dL/dp = w * exp(sum_k' ln(1-p)) / (1-p)
              g[i] = w * std::exp(logq[i]) / (1.0 - pik);
            }
            dot += g[i] * pik;
          }
          for (std::size_t j = 0; j < ne; ++j)
            (*grad)(base + k, j) += static_cast<T>(upstream * (g[j] - dot) / srow[k]);
        }
      }
    }
  }
  return loss * w;
}

/// Mean over tokens of sum_i |A_i|, with optional gradient.
template <typename T>
double l1_loss_core(const Tensor<T>& a, Tensor<T>* grad, T upstream) {
  const std::size_t n = a.rows();
  check_contract(n >= 1, "l1_loss: empty input");
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) loss += std::abs(static_cast<double>(a(r, c)));
  if (grad != nullptr) {
    const T w = upstream / static_cast<T>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < a.cols(); ++c) {
        const T v = a(r, c);
        (*grad)(r, c) += v > T{0} ? w : (v < T{0} ? -w : T{0});
      }
  }
  return loss / static_cast<double>(n);
}

/// Mean per-token entropy of the expert-normalized pattern, 0*ln(0) := 0.
/// Entries with p <= kBceClamp contribute no gradient (documented kink).
template <typename T>
double entropy_loss_core(const Tensor<T>& a1, Tensor<T>* grad, T upstream) {
  const std::size_t n = a1.rows(), ne = a1.cols();
  check_contract(n >= 1, "entropy_loss: empty input");
  for (const T v : a1.flat())
    check_contract(v >= T{0}, "entropy_loss: negative entry in activation pattern");
  double loss = 0.0;
  std::vector<double> p(ne), g(ne);
  for (std::size_t r = 0; r < n; ++r) {
    double sum = 0.0;
    for (std::size_t i = 0; i < ne; ++i) sum += static_cast<double>(a1(r, i));
    if (sum <= 0.0) continue;
    double h = 0.0;
    for (std::size_t i = 0; i < ne; ++i) {
      p[i] = static_cast<double>(a1(r, i)) / sum;
      if (p[i] > 0.0) h += -p[i] * std::log(p[i]);
    }
    loss += h;
    if (grad != nullptr) {
      const double w = 1.0 / static_cast<double>(n);
      double dot = 0.0;
      for (std::size_t i = 0; i < ne; ++i) {
        g[i] = p[i] > kBceClamp ? -w * (std::log(p[i]) + 1.0) : 0.0;
        dot += g[i] * p[i];
      }
      for (std::size_t j = 0; j < ne; ++j)
        (*grad)(r, j) += static_cast<T>(upstream * (g[j] - dot) / sum);
    }
  }
  return loss / static_cast<double>(n);
}

/// Switch-style balancing term: N_e * sum_i f_i * P_i, where f_i is expert
/// i's share of all activations and P_i the mean normalized router
/// probability. Gradient flows through P only (f is a count).
template <typename T>
double load_balance_core(const Tensor<T>& a1, Tensor<T>* grad, T upstream) {
  const std::size_t n = a1.rows(), ne = a1.cols();
  check_contract(n >= 1, "load_balance_loss: empty input");
  std::vector<double> f(ne, 0.0), pmean(ne, 0.0);
  double total_active = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double sum = 0.0;
    for (std::size_t i = 0; i < ne; ++i) sum += static_cast<double>(a1(r, i));
    for (std::size_t i = 0; i < ne; ++i) {
      if (a1(r, i) > T{0}) {
        f[i] += 1.0;
        total_active += 1.0;
      }
      if (sum > 0.0) pmean[i] += static_cast<double>(a1(r, i)) / sum / static_cast<double>(n);
    }
  }
  if (total_active == 0.0) return 0.0;
  for (auto& v : f) v /= total_active;
  double loss = 0.0;
  for (std::size_t i = 0; i < ne; ++i) loss += f[i] * pmean[i];
  loss *= static_cast<double>(ne);
  if (grad != nullptr) {
    // dL/dP_i = N_e * f_i; chain through the per-row normalization.
    for (std::size_t r = 0; r < n; ++r) {
      double sum = 0.0;
      for (std::size_t i = 0; i < ne; ++i) sum += static_cast<double>(a1(r, i));
      if (sum <= 0.0) continue;
      double dot = 0.0;
      std::vector<double> g(ne);
      for (std::size_t i = 0; i < ne; ++i) {
        g[i] = static_cast<double>(ne) * f[i] / static_cast<double>(n);
        dot += g[i] * (static_cast<double>(a1(r, i)) / sum);
      }
      for (std::size_t j = 0; j < ne; ++j)
        (*grad)(r, j) += static_cast<T>(upstream * (g[j] - dot) / sum);
    }
  }
  return loss;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plain (metric / oracle) entry points.
// ---------------------------------------------------------------------------

/// Neighbor-pattern BCE over sigmoid(alpha * A0). seq_len partitions the rows
/// into independent sequences; n = 1 (or seq_len = 1) has no pairs -> 0.
template <typename T>
double activation_locality_loss(const Tensor<T>& a0, double alpha = kDefaultAlpha,
                                std::size_t seq_len = 0, bool detach_target = false) {
  if (seq_len == 0) seq_len = a0.rows();
  return detail::al_loss_core<T>(a0, alpha, seq_len, detach_target, nullptr, T{0});
}

/// Single-chunk form: the whole matrix is one chunk of length rows.
template <typename T>
double chunk_sparsification_loss(const Tensor<T>& a1) {
  return detail::cs_loss_core<T>(a1, a1.rows(), a1.rows(), nullptr, T{0});
}

/// Training form: aligned disjoint chunks of chunk_len within each sequence.
template <typename T>
double chunk_sparsification_loss(const Tensor<T>& a1, std::size_t chunk_len,
                                 std::size_t seq_len) {
  return detail::cs_loss_core<T>(a1, chunk_len, seq_len, nullptr, T{0});
}

template <typename T>
double l1_loss(const Tensor<T>& a) {
  return detail::l1_loss_core<T>(a, nullptr, T{0});
}

template <typename T>
double router_entropy_loss(const Tensor<T>& a1) {
  return detail::entropy_loss_core<T>(a1, nullptr, T{0});
}

template <typename T>
double load_balance_loss(const Tensor<T>& a1) {
  return detail::load_balance_core<T>(a1, nullptr, T{0});
}

// ---------------------------------------------------------------------------
// Tape entry points (fused forward + hand-derived backward).
// ---------------------------------------------------------------------------

template <typename T>
typename Tape<T>::Id al_loss_op(Tape<T>& tape, typename Tape<T>::Id a0, double alpha,
                                std::size_t seq_len, bool detach_target = false) {
  const double loss =
      detail::al_loss_core<T>(tape.value(a0), alpha, seq_len, detach_target, nullptr, T{0});
  const bool ng = tape.requires_grad(a0);
  return tape.custom_op(
      Tensor<T>::full(1, 1, static_cast<T>(loss)), ng,
      [&tape, a0, alpha, seq_len, detach_target](typename Tape<T>::Id out) {
        const Tensor<T>& in = tape.value(a0);
        Tensor<T> g(in.rows(), in.cols());
        detail::al_loss_core(in, alpha, seq_len, detach_target, &g,
                             tape.upstream_grad(out).flat()[0]);
        tape.add_grad(a0, std::move(g));
      });
}

template <typename T>
typename Tape<T>::Id cs_loss_op(Tape<T>& tape, typename Tape<T>::Id a1, std::size_t chunk_len,
                                std::size_t seq_len) {
  const double loss = detail::cs_loss_core<T>(tape.value(a1), chunk_len, seq_len, nullptr, T{0});
  const bool ng = tape.requires_grad(a1);
  return tape.custom_op(Tensor<T>::full(1, 1, static_cast<T>(loss)), ng,
                        [&tape, a1, chunk_len, seq_len](typename Tape<T>::Id out) {
                          const Tensor<T>& in = tape.value(a1);
                          Tensor<T> g(in.rows(), in.cols());
                          detail::cs_loss_core(in, chunk_len, seq_len, &g,
                                               tape.upstream_grad(out).flat()[0]);
                          tape.add_grad(a1, std::move(g));
                        });
}

template <typename T>
typename Tape<T>::Id l1_loss_op(Tape<T>& tape, typename Tape<T>::Id a) {
  const double loss = detail::l1_loss_core<T>(tape.value(a), nullptr, T{0});
  return tape.custom_op(Tensor<T>::full(1, 1, static_cast<T>(loss)), tape.requires_grad(a),
                        [&tape, a](typename Tape<T>::Id out) {
                          const Tensor<T>& in = tape.value(a);
                          Tensor<T> g(in.rows(), in.cols());
                          detail::l1_loss_core(in, &g, tape.upstream_grad(out).flat()[0]);
                          tape.add_grad(a, std::move(g));
                        });
}

template <typename T>
typename Tape<T>::Id entropy_loss_op(Tape<T>& tape, typename Tape<T>::Id a1) {
  const double loss = detail::entropy_loss_core<T>(tape.value(a1), nullptr, T{0});
  return tape.custom_op(Tensor<T>::full(1, 1, static_cast<T>(loss)), tape.requires_grad(a1),
                        [&tape, a1](typename Tape<T>::Id out) {
                          const Tensor<T>& in = tape.value(a1);
                          Tensor<T> g(in.rows(), in.cols());
                          detail::entropy_loss_core(in, &g, tape.upstream_grad(out).flat()[0]);
                          tape.add_grad(a1, std::move(g));
                        });
}

template <typename T>
typename Tape<T>::Id load_balance_op(Tape<T>& tape, typename Tape<T>::Id a1) {
  const double loss = detail::load_balance_core<T>(tape.value(a1), nullptr, T{0});
  return tape.custom_op(Tensor<T>::full(1, 1, static_cast<T>(loss)), tape.requires_grad(a1),
                        [&tape, a1](typename Tape<T>::Id out) {
                          const Tensor<T>& in = tape.value(a1);
                          Tensor<T> g(in.rows(), in.cols());
                          detail::load_balance_core(in, &g, tape.upstream_grad(out).flat()[0]);
                          tape.add_grad(a1, std::move(g));
                        });
}

// ---------------------------------------------------------------------------
// Loss composition.
// ---------------------------------------------------------------------------

struct LossBundle {
  double l_lm = 0.0;
  double l_al = 0.0;
  double l_cs = 0.0;   // the active sparsification term (cs, or its substitute)
  double l_aux = 0.0;  // optional balancing term
  double lambda_al = 0.0;
  double lambda_cs = 0.0;
  double lambda_aux = 0.0;
  double l_total = 0.0;
};

inline LossBundle total_loss(double l_lm, double l_al, double l_cs, double lambda_al,
                             double lambda_cs, double l_aux = 0.0, double lambda_aux = 0.0) {
  LossBundle b;
  b.l_lm = l_lm;
  b.l_al = l_al;
  b.l_cs = l_cs;
  b.l_aux = l_aux;
  b.lambda_al = lambda_al;
  b.lambda_cs = lambda_cs;
  b.lambda_aux = lambda_aux;
  b.l_total = l_lm + lambda_al * l_al + lambda_cs * l_cs + lambda_aux * l_aux;
  if (!std::isfinite(b.l_total)) throw NumericError("total_loss: non-finite loss part");
  return b;
}

// ---------------------------------------------------------------------------
// Adaptive factor scheduler for lambda_cs.
// ---------------------------------------------------------------------------

/// Multiplicative controller: lambda stays at lambda0 for the first n_st
/// steps; afterwards, every n_adj steps it is scaled by the ratio of the
/// last two window averages of the loss (capped below by gamma_min on the
/// increase side).
struct SchedulerState {
  double lambda_cs = 0.0;
  double lambda_cs_0 = 0.0;
  std::size_t step = 0;
  std::size_t n_st = 1000;
  std::size_t n_adj = 100;
  double gamma_min = 1.025;
  double window_sum_current = 0.0;
  double window_sum_previous = 0.0;
  bool has_previous_window = false;
  std::size_t hold_events = 0;  // adjustments skipped because the previous window averaged 0
  double last_gamma = 1.0;

  static SchedulerState init(double lambda0, std::size_t n_st, std::size_t n_adj,
                             double gamma_min) {
    check_config(n_adj >= 1, "scheduler: n_adj must be >= 1");
    check_config(lambda0 > 0.0, "scheduler: lambda0 must be > 0");
    SchedulerState s;
    s.lambda_cs = s.lambda_cs_0 = lambda0;
    s.n_st = n_st;
    s.n_adj = n_adj;
    s.gamma_min = gamma_min;
    return s;
  }
};

inline void scheduler_step(SchedulerState& s, double l_cs_t) {
  check_contract(std::isfinite(l_cs_t) && l_cs_t >= 0.0,
                 "scheduler_step: loss must be finite and >= 0");
  s.window_sum_current += l_cs_t;
  ++s.step;
  if (s.step % s.n_adj != 0) return;
  if (s.step <= s.n_st) {
    s.lambda_cs = s.lambda_cs_0;
  } else if (!s.has_previous_window || s.window_sum_previous == 0.0) {
    ++s.hold_events;  // flagged: no usable previous window
  } else {
    const double gamma = s.window_sum_current / s.window_sum_previous;
    s.last_gamma = gamma;
    s.lambda_cs *= gamma <= 1.0 ? gamma : std::max(s.gamma_min, gamma);
  }
  s.window_sum_previous = s.window_sum_current;
  s.window_sum_current = 0.0;
  s.has_previous_window = true;
}

}  // namespace chunkmoe
