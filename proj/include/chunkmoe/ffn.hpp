// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "chunkmoe/tape.hpp"
#include "chunkmoe/tensor.hpp"

namespace chunkmoe {

/// Routing strategies. relu_rmsnorm is the layer this project is built
/// around; the rest are the usual baselines.
enum class RouterKind {
  relu_rmsnorm,       // ReLU pattern, RMSNorm-scaled magnitudes
  relu_plain,         // ReLU only
  topk_softmax,       // vanilla TopK MoE
  shared_topk_softmax,// TopK + always-on shared experts
  sigmoid_norm_topk,  // sigmoid -> TopK -> renormalize, + shared experts
  topp_softmax,       // nucleus-style TopP
};

enum class ExpertKind { nongated_swish, gated_swish };

inline const char* to_string(RouterKind k) {
  switch (k) {
    case RouterKind::relu_rmsnorm: return "relu_rmsnorm";
    case RouterKind::relu_plain: return "relu_plain";
    case RouterKind::topk_softmax: return "topk_softmax";
    case RouterKind::shared_topk_softmax: return "shared_topk_softmax";
    case RouterKind::sigmoid_norm_topk: return "sigmoid_norm_topk";
    case RouterKind::topp_softmax: return "topp_softmax";
  }
  return "?";
}

inline const char* to_string(ExpertKind k) {
  return k == ExpertKind::nongated_swish ? "nongated_swish" : "gated_swish";
}

struct FfnConfig {
  std::size_t d_h = 0;        // hidden dim
  std::size_t d_e = 0;        // expert intermediate dim (fine-grained: d_e < d_h)
  std::size_t n_experts = 0;  // N_e
  std::size_t n_shared = 0;   // always-on experts, first slots (shared kinds only)
  RouterKind router = RouterKind::relu_rmsnorm;
  ExpertKind expert = ExpertKind::nongated_swish;
  std::size_t top_k = 0;      // for topk kinds
  double top_p = 1.0;         // for topp kind
  double eps = kRmsNormEps;   // rmsnorm epsilon

  std::size_t routed_experts() const { return n_experts - n_shared; }

  bool uses_top_k() const {
    return router == RouterKind::topk_softmax || router == RouterKind::shared_topk_softmax ||
           router == RouterKind::sigmoid_norm_topk;
  }

  bool uses_shared() const {
    return router == RouterKind::shared_topk_softmax || router == RouterKind::sigmoid_norm_topk;
  }

  void validate() const {
    check_config(d_h > 0 && d_e > 0 && n_experts > 0, "ffn config: dims must be positive");
    check_config(n_shared < n_experts, "ffn config: n_shared must be < n_experts");
    check_config(uses_shared() || n_shared == 0,
                 "ffn config: n_shared requires a shared-expert router kind");
    if (uses_top_k())
      check_config(top_k >= 1 && top_k <= routed_experts(),
                   "ffn config: top_k must be in [1, routed experts]");
    if (router == RouterKind::topp_softmax)
      check_config(top_p > 0.0 && top_p <= 1.0, "ffn config: top_p must be in (0, 1]");
    check_config(eps > 0.0, "ffn config: eps must be > 0");
  }
};

/// Learnable weights of one FFN layer.
template <typename T>
struct FfnParams {
  Tensor<T> w_router;               // [d_h x routed_experts]
  Tensor<T> router_gain;            // [1 x N_e], relu_rmsnorm only
  std::vector<Tensor<T>> w_up;      // per expert [d_h x d_e]
  std::vector<Tensor<T>> w_down;    // per expert [d_e x d_h]
  std::vector<Tensor<T>> w_gate;    // per expert [d_h x d_e], gated kind only

  static FfnParams init(const FfnConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    FfnParams p;
    p.w_router = randn_fanin<T>(cfg.d_h, cfg.routed_experts(), cfg.d_h, rng);
    if (cfg.router == RouterKind::relu_rmsnorm)
      p.router_gain = Tensor<T>::full(1, cfg.n_experts, T{1});
    p.w_up.reserve(cfg.n_experts);
    p.w_down.reserve(cfg.n_experts);
    for (std::size_t i = 0; i < cfg.n_experts; ++i) {
      p.w_up.push_back(randn_fanin<T>(cfg.d_h, cfg.d_e, cfg.d_h, rng));
      p.w_down.push_back(randn_fanin<T>(cfg.d_e, cfg.d_h, cfg.d_e, rng));
      if (cfg.expert == ExpertKind::gated_swish)
        p.w_gate.push_back(randn_fanin<T>(cfg.d_h, cfg.d_e, cfg.d_h, rng));
    }
    return p;
  }
};

/// The router triple for a token chunk: pre-activation, nonlinearity
/// pattern, and final activation values. All are [n_tokens x N_e]; for
/// shared-expert kinds the shared columns carry 0 in a0 and 1 in a1/a.
template <typename T>
struct RouterActivations {
  Tensor<T> a0;
  Tensor<T> a1;
  Tensor<T> a;
};

namespace detail {

/// Indices of the k largest entries; ties broken toward the lower index.
template <typename T>
std::vector<std::size_t> topk_indices(const T* v, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [v](std::size_t a, std::size_t b) {
    if (v[a] != v[b]) return v[a] > v[b];
    return a < b;
  });
  idx.resize(k);
  return idx;
}

/// Smallest descending-order prefix whose mass reaches p (the crossing
/// entry is included).
template <typename T>
std::vector<std::size_t> topp_indices(const T* v, std::size_t n, double p) {
  std::vector<std::size_t> idx = topk_indices(v, n, n);
  double mass = 0.0;
  std::size_t keep = 0;
  for (; keep < n; ++keep) {
    mass += static_cast<double>(v[idx[keep]]);
    if (mass >= p) {
      ++keep;
      break;
    }
  }
  idx.resize(std::max<std::size_t>(keep, 1));
  return idx;
}

/// 0/1 selection masks for the routed block of a top-k/top-p router.
template <typename T>
Tensor<T> selection_mask(const Tensor<T>& scores, const FfnConfig& cfg) {
  Tensor<T> m(scores.rows(), scores.cols());
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    const std::vector<std::size_t> sel =
        cfg.router == RouterKind::topp_softmax
            ? topp_indices(scores.row(r), scores.cols(), cfg.top_p)
            : topk_indices(scores.row(r), scores.cols(), cfg.top_k);
    for (std::size_t j : sel) m(r, j) = T{1};
  }
  return m;
}

template <typename T>
Tensor<T> pad_shared_cols(const Tensor<T>& routed, std::size_t n_shared, T shared_value) {
  if (n_shared == 0) return routed;
  Tensor<T> full(routed.rows(), n_shared + routed.cols());
  for (std::size_t r = 0; r < routed.rows(); ++r) {
    for (std::size_t c = 0; c < n_shared; ++c) full(r, c) = shared_value;
    for (std::size_t c = 0; c < routed.cols(); ++c) full(r, n_shared + c) = routed(r, c);
  }
  return full;
}

template <typename T>
Tensor<T> row_normalize_plain(const Tensor<T>& x) {
  Tensor<T> out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T s{0};
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c);
    check_contract(s != T{0}, "row_normalize: zero row sum");
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) / s;
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plain (inference / oracle) forward path.
// ---------------------------------------------------------------------------

template <typename T>
RouterActivations<T> router_forward(const Tensor<T>& x, const FfnParams<T>& params,
                                    const FfnConfig& cfg) {
  cfg.validate();
  check_contract(x.cols() == cfg.d_h, "router_forward: x cols != d_h");
  RouterActivations<T> acts;
  Tensor<T> a0 = matmul(x, params.w_router);  // [n x routed]
  switch (cfg.router) {
    case RouterKind::relu_rmsnorm: {
      acts.a1 = relu(a0);
      acts.a = rmsnorm_rows(acts.a1, params.router_gain.flat(), static_cast<T>(cfg.eps));
      break;
    }
    case RouterKind::relu_plain: {
      acts.a1 = relu(a0);
      acts.a = acts.a1;
      break;
    }
    case RouterKind::topk_softmax:
    case RouterKind::shared_topk_softmax: {
      Tensor<T> sm = softmax_rows(a0);
      Tensor<T> m = detail::selection_mask(sm, cfg);
      acts.a1 = detail::pad_shared_cols(sm, cfg.n_shared, T{1});
      acts.a = detail::pad_shared_cols(hadamard(sm, m), cfg.n_shared, T{1});
      break;
    }
    case RouterKind::sigmoid_norm_topk: {
      Tensor<T> sg = sigmoid(a0);
      Tensor<T> m = detail::selection_mask(sg, cfg);
      Tensor<T> norm = detail::row_normalize_plain(hadamard(sg, m));
      acts.a1 = detail::pad_shared_cols(sg, cfg.n_shared, T{1});
      acts.a = detail::pad_shared_cols(norm, cfg.n_shared, T{1});
      break;
    }
    case RouterKind::topp_softmax: {
      Tensor<T> sm = softmax_rows(a0);
      Tensor<T> m = detail::selection_mask(sm, cfg);
      acts.a1 = sm;
      acts.a = hadamard(sm, m);
      break;
    }
  }
  acts.a0 = detail::pad_shared_cols(a0, cfg.n_shared, T{0});
  return acts;
}

template <typename T>
Tensor<T> expert_forward(const Tensor<T>& x, const FfnParams<T>& params, const FfnConfig& cfg,
                         std::size_t expert) {
  check_contract(expert < cfg.n_experts, "expert_forward: expert index out of range");
  if (cfg.expert == ExpertKind::nongated_swish)
    return matmul(swish(matmul(x, params.w_up[expert])), params.w_down[expert]);
  return matmul(
      hadamard(swish(matmul(x, params.w_gate[expert])), matmul(x, params.w_up[expert])),
      params.w_down[expert]);
}

template <typename T>
struct FfnForwardResult {
  Tensor<T> y;
  RouterActivations<T> acts;
};

/// y_row = sum_i A_i(x) * E_i(x). With skip_zero_experts the zero-activation
/// terms are skipped; the summation order over experts is identical either
/// way, so both paths agree bitwise.
template <typename T>
FfnForwardResult<T> ffn_forward(const Tensor<T>& x, const FfnParams<T>& params,
                                const FfnConfig& cfg, bool skip_zero_experts = true) {
  FfnForwardResult<T> res;
  res.acts = router_forward(x, params, cfg);
  res.y = Tensor<T>::zeros(x.rows(), cfg.d_h);
  for (std::size_t i = 0; i < cfg.n_experts; ++i) {
    bool any = !skip_zero_experts;
    if (skip_zero_experts) {
      for (std::size_t r = 0; r < x.rows() && !any; ++r) any = res.acts.a(r, i) != T{0};
    }
    if (!any) continue;
    Tensor<T> e = expert_forward(x, params, cfg, i);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const T w = res.acts.a(r, i);
      if (skip_zero_experts && w == T{0}) continue;
      T* yr = res.y.row(r);
      const T* er = e.row(r);
      for (std::size_t c = 0; c < cfg.d_h; ++c) yr[c] += w * er[c];
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Tape (training) forward path. Mirrors the plain path op for op.
// ---------------------------------------------------------------------------

template <typename T>
struct FfnParamIds {
  using Id = typename Tape<T>::Id;
  Id w_router = 0;
  Id router_gain = 0;
  std::vector<Id> w_up, w_down, w_gate;
  bool has_gain = false;
};

template <typename T>
FfnParamIds<T> ffn_params_to_tape(Tape<T>& tape, const FfnParams<T>& p, const FfnConfig& cfg) {
  FfnParamIds<T> ids;
  ids.w_router = tape.leaf(p.w_router);
  if (cfg.router == RouterKind::relu_rmsnorm) {
    ids.router_gain = tape.leaf(p.router_gain);
    ids.has_gain = true;
  }
  for (std::size_t i = 0; i < cfg.n_experts; ++i) {
    ids.w_up.push_back(tape.leaf(p.w_up[i]));
    ids.w_down.push_back(tape.leaf(p.w_down[i]));
    if (cfg.expert == ExpertKind::gated_swish) ids.w_gate.push_back(tape.leaf(p.w_gate[i]));
  }
  return ids;
}

template <typename T>
struct RouterIds {
  using Id = typename Tape<T>::Id;
  Id a0 = 0;  // [n x N_e] (shared columns zero)
  Id a1 = 0;  // [n x N_e]
  Id a = 0;   // [n x N_e]
};

template <typename T>
RouterIds<T> router_forward_tape(Tape<T>& tape, typename Tape<T>::Id x,
                                 const FfnParamIds<T>& params, const FfnConfig& cfg) {
  using Id = typename Tape<T>::Id;
  cfg.validate();
  const std::size_t n = tape.value(x).rows();
  RouterIds<T> out;
  Id a0 = tape.matmul(x, params.w_router);
  auto pad = [&](Id routed, T shared_value) -> Id {
    if (cfg.n_shared == 0) return routed;
    Id shared = tape.constant(Tensor<T>::full(n, cfg.n_shared, shared_value));
    return tape.concat_cols(shared, routed);
  };
  switch (cfg.router) {
    case RouterKind::relu_rmsnorm: {
      Id a1 = tape.relu(a0);
      out.a1 = a1;
      out.a = tape.rmsnorm_rows(a1, params.router_gain, static_cast<T>(cfg.eps));
      break;
    }
    case RouterKind::relu_plain: {
      out.a1 = tape.relu(a0);
      out.a = out.a1;
      break;
    }
    case RouterKind::topk_softmax:
    case RouterKind::shared_topk_softmax: {
      Id sm = tape.softmax_rows(a0);
      Tensor<T> m = detail::selection_mask(tape.value(sm), cfg);
      out.a1 = pad(sm, T{1});
      out.a = pad(tape.mask(sm, std::move(m)), T{1});
      break;
    }
    case RouterKind::sigmoid_norm_topk: {
      Id sg = tape.sigmoid(a0);
      Tensor<T> m = detail::selection_mask(tape.value(sg), cfg);
      Id norm = tape.row_normalize(tape.mask(sg, std::move(m)));
      out.a1 = pad(sg, T{1});
      out.a = pad(norm, T{1});
      break;
    }
    case RouterKind::topp_softmax: {
      Id sm = tape.softmax_rows(a0);
      Tensor<T> m = detail::selection_mask(tape.value(sm), cfg);
      out.a1 = sm;
      out.a = tape.mask(sm, std::move(m));
      break;
    }
  }
  out.a0 = pad(a0, T{0});
  return out;
}

template <typename T>
typename Tape<T>::Id expert_forward_tape(Tape<T>& tape, typename Tape<T>::Id x,
                                         const FfnParamIds<T>& params, const FfnConfig& cfg,
                                         std::size_t expert) {
  using Id = typename Tape<T>::Id;
  if (cfg.expert == ExpertKind::nongated_swish)
    return tape.matmul(tape.swish(tape.matmul(x, params.w_up[expert])), params.w_down[expert]);
  Id gate = tape.swish(tape.matmul(x, params.w_gate[expert]));
  Id up = tape.matmul(x, params.w_up[expert]);
  return tape.matmul(tape.hadamard(gate, up), params.w_down[expert]);
}

template <typename T>
struct FfnTapeResult {
  typename Tape<T>::Id y = 0;
  RouterIds<T> router;
};

template <typename T>
FfnTapeResult<T> ffn_forward_tape(Tape<T>& tape, typename Tape<T>::Id x,
                                  const FfnParamIds<T>& params, const FfnConfig& cfg) {
  using Id = typename Tape<T>::Id;
  FfnTapeResult<T> res;
  res.router = router_forward_tape(tape, x, params, cfg);
  Id y = tape.constant(Tensor<T>::zeros(tape.value(x).rows(), cfg.d_h));
  for (std::size_t i = 0; i < cfg.n_experts; ++i) {
    Id e = expert_forward_tape(tape, x, params, cfg, i);
    Id weighted = tape.scale_rows(e, tape.col(res.router.a, i));
    y = tape.add(y, weighted);
  }
  res.y = y;
  return res;
}

}  // namespace chunkmoe
