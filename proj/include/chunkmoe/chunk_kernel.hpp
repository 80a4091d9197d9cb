// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "chunkmoe/ffn.hpp"
#include "chunkmoe/metrics.hpp"
#include "chunkmoe/tensor.hpp"

namespace chunkmoe {

/// Activated-expert index union for a chunk, plus the per-token activation
/// masks the kernel uses to discard precomputed rows.
struct ChunkUnionPlan {
  std::vector<std::size_t> union_indices;  // strictly increasing
  std::vector<std::uint8_t> per_token_mask;  // [n_tokens x n_experts], row-major
  std::size_t n_tokens = 0;
  std::size_t n_experts = 0;
  double threshold = 0.0;

  bool active(std::size_t token, std::size_t expert) const {
    return per_token_mask[token * n_experts + expert] != 0;
  }
};

template <typename T>
ChunkUnionPlan build_union_plan(const Tensor<T>& a, double threshold = 0.0) {
  check_contract(a.rows() >= 1, "build_union_plan: need at least one token");
  ChunkUnionPlan plan;
  plan.n_tokens = a.rows();
  plan.n_experts = a.cols();
  plan.threshold = threshold;
  plan.per_token_mask.assign(a.rows() * a.cols(), 0);
  std::vector<bool> in_union(a.cols(), false);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t e = 0; e < a.cols(); ++e)
      if (activated(a(r, e), threshold)) {
        plan.per_token_mask[r * a.cols() + e] = 1;
        in_union[e] = true;
      }
  for (std::size_t e = 0; e < a.cols(); ++e)
    if (in_union[e]) plan.union_indices.push_back(e);
  return plan;
}

/// Counted-cost model for one chunk. Weight bytes are counted once per
/// chunk (the union's experts are loaded once and reused across tokens);
/// FLOPs include the precomputed-then-discarded rows, mirroring the
/// precompute-and-mask execution.
struct CostReport {
  std::uint64_t expert_weight_bytes_touched = 0;
  std::uint64_t dense_expert_weight_bytes = 0;
  std::uint64_t flops_sparse = 0;
  std::uint64_t flops_dense = 0;
  double union_density = 0.0;

  double bytes_ratio() const {
    return static_cast<double>(expert_weight_bytes_touched) /
           static_cast<double>(dense_expert_weight_bytes);
  }
};

inline CostReport cost_accounting(const ChunkUnionPlan& plan, const FfnConfig& cfg,
                                  std::size_t bytes_per_param) {
  check_contract(plan.n_experts == cfg.n_experts, "cost_accounting: plan/config mismatch");
  CostReport r;
  const std::uint64_t per_expert_params =
      2ull * static_cast<std::uint64_t>(cfg.d_h) * static_cast<std::uint64_t>(cfg.d_e);
  const std::uint64_t u = plan.union_indices.size();
  r.expert_weight_bytes_touched = u * per_expert_params * bytes_per_param;
  r.dense_expert_weight_bytes = cfg.n_experts * per_expert_params * bytes_per_param;
  const std::uint64_t per_expert_flops =
      2ull * per_expert_params * static_cast<std::uint64_t>(plan.n_tokens);
  r.flops_sparse = u * per_expert_flops;
  r.flops_dense = cfg.n_experts * per_expert_flops;
  r.union_density = static_cast<double>(u) / static_cast<double>(cfg.n_experts);
  return r;
}

/// Test hook: runs after the up projection of a union expert and before the
/// activation mask is applied, so masked entries it writes must not reach
/// the output.
template <typename T>
using MidHook = std::function<void(std::size_t expert, Tensor<T>& mid)>;

/// Chunk-union FFN: up-project all n tokens for every expert in the union,
/// mask rows outside support(A), down-project, and accumulate weighted by A.
/// Loop orders match the dense reference, so the two agree bitwise.
template <typename T>
Tensor<T> sparse_chunk_ffn(const Tensor<T>& x, const FfnParams<T>& params, const FfnConfig& cfg,
                           const ChunkUnionPlan& plan, const Tensor<T>& a,
                           const MidHook<T>& hook = nullptr) {
  check_contract(cfg.expert == ExpertKind::nongated_swish,
                 "sparse_chunk_ffn: gated experts are not supported on the sparse path");
  check_contract(plan.n_tokens == x.rows() && plan.n_tokens == a.rows() &&
                     plan.n_experts == a.cols() && plan.n_experts == cfg.n_experts,
                 "sparse_chunk_ffn: plan/input shape mismatch");
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t e = 0; e < a.cols(); ++e)
      check_contract(plan.active(r, e) == activated(a(r, e), plan.threshold),
                     "sparse_chunk_ffn: plan does not match A");

  const std::size_t n = x.rows();
  Tensor<T> y(n, cfg.d_h);
  for (const std::size_t e : plan.union_indices) {
    Tensor<T> mid = swish(matmul(x, params.w_up[e]));
    if (hook) hook(e, mid);
    // Discard precomputed rows outside support(A).
    for (std::size_t r = 0; r < n; ++r)
      if (!plan.active(r, e))
        for (std::size_t c = 0; c < cfg.d_e; ++c) mid(r, c) = T{0};
    Tensor<T> down = matmul(mid, params.w_down[e]);
    for (std::size_t r = 0; r < n; ++r) {
      const T w = a(r, e);
      T* yr = y.row(r);
      const T* dr = down.row(r);
      for (std::size_t c = 0; c < cfg.d_h; ++c) yr[c] += w * dr[c];
    }
  }
  return y;
}

/// Dense reference: every expert, no masking, same loop orders.
template <typename T>
Tensor<T> dense_chunk_ffn_reference(const Tensor<T>& x, const FfnParams<T>& params,
                                    const FfnConfig& cfg, const Tensor<T>& a) {
  check_contract(cfg.expert == ExpertKind::nongated_swish,
                 "dense_chunk_ffn_reference: nongated experts only");
  const std::size_t n = x.rows();
  Tensor<T> y(n, cfg.d_h);
  for (std::size_t e = 0; e < cfg.n_experts; ++e) {
    Tensor<T> down = matmul(swish(matmul(x, params.w_up[e])), params.w_down[e]);
    for (std::size_t r = 0; r < n; ++r) {
      const T w = a(r, e);
      T* yr = y.row(r);
      const T* dr = down.row(r);
      for (std::size_t c = 0; c < cfg.d_h; ++c) yr[c] += w * dr[c];
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Wall-clock benchmark.
// ---------------------------------------------------------------------------

struct BenchRow {
  double density = 0.0;
  std::size_t n = 0, d_h = 0, d_e = 0, n_experts = 0;
  std::uint64_t sparse_ns = 0;
  std::uint64_t dense_ns = 0;
  double bytes_ratio = 0.0;
};

/// Synthetic activations whose union covers exactly round(density * N_e)
/// experts; each union expert is touched by at least one token and most
/// tokens touch most union experts (the high-locality regime the kernel
/// targets).
template <typename T>
Tensor<T> synthetic_chunk_activations(std::size_t n, std::size_t ne, double density,
                                      std::mt19937_64& rng) {
  Tensor<T> a(n, ne);
  const std::size_t u =
      density <= 0.0 ? 0 : std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(density * static_cast<double>(ne))));
  std::vector<std::size_t> experts(ne);
  std::iota(experts.begin(), experts.end(), 0);
  std::shuffle(experts.begin(), experts.end(), rng);
  experts.resize(u);
  std::uniform_real_distribution<double> val(0.5, 1.5), coin(0.0, 1.0);
  for (std::size_t j = 0; j < u; ++j) {
    const std::size_t e = experts[j];
    a(j % n, e) = static_cast<T>(val(rng));  // guarantee the expert is in the union
    for (std::size_t r = 0; r < n; ++r)
      if (coin(rng) < 0.9) a(r, e) = static_cast<T>(val(rng));
  }
  return a;
}

namespace detail {
template <typename F>
std::uint64_t time_median_ns(F&& fn, std::size_t reps) {
  using clock = std::chrono::steady_clock;
  // Calibrate an inner loop so each sample is comfortably above timer
  // resolution.
  std::size_t inner = 1;
  for (;;) {
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(clock::now() - t0).count();
    if (ns >= 100000 || inner >= 4096) break;
    inner *= 4;
  }
  std::vector<std::uint64_t> samples(reps);
  for (auto& s : samples) {
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    s = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(clock::now() - t0).count()) /
        inner;
  }
  std::sort(samples.begin(), samples.end());
  return samples[samples.size() / 2];
}
}  // namespace detail

/// Sparse vs dense wall-clock over a grid of synthetic union densities.
inline std::vector<BenchRow> bench_chunk_ffn(const FfnConfig& cfg,
                                             const std::vector<double>& densities,
                                             std::size_t n = 32, std::size_t reps = 9,
                                             std::uint64_t seed = 42) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  FfnParams<float> params = FfnParams<float>::init(cfg, rng);
  Tensor<float> x = randn<float>(n, cfg.d_h, rng);
  std::vector<BenchRow> rows;
  for (const double density : densities) {
    Tensor<float> a = synthetic_chunk_activations<float>(n, cfg.n_experts, density, rng);
    BenchRow row;
    row.density = density;
    row.n = n;
    row.d_h = cfg.d_h;
    row.d_e = cfg.d_e;
    row.n_experts = cfg.n_experts;
    volatile float sink = 0.0f;
    row.sparse_ns = detail::time_median_ns(
        [&] {
          ChunkUnionPlan plan = build_union_plan(a);
          Tensor<float> y = sparse_chunk_ffn(x, params, cfg, plan, a);
          sink = sink + y(0, 0);
        },
        reps);
    row.dense_ns = detail::time_median_ns(
        [&] {
          Tensor<float> y = dense_chunk_ffn_reference(x, params, cfg, a);
          sink = sink + y(0, 0);
        },
        reps);
    row.bytes_ratio = cost_accounting(build_union_plan(a), cfg, sizeof(float)).bytes_ratio();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace chunkmoe
