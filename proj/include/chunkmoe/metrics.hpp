// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "chunkmoe/tensor.hpp"

namespace chunkmoe {

/// "Activated" everywhere below means |A| strictly above the threshold
/// (default 0: exact nonzero, which ReLU routing produces).
template <typename T>
inline bool activated(T v, double threshold) {
  return std::abs(static_cast<double>(v)) > threshold;
}

/// Token-level sparsity: mean fraction of inactive experts per token.
template <typename T>
double tls(const Tensor<T>& a, double threshold = 0.0) {
  check_contract(a.rows() >= 1, "tls: need at least one token");
  std::size_t inactive = 0;
  for (const T v : a.flat())
    if (!activated(v, threshold)) ++inactive;
  return static_cast<double>(inactive) / static_cast<double>(a.size());
}

/// Chunk-level sparsity: per aligned disjoint chunk of chunk_len tokens, the
/// fraction of experts inactive for every token of the chunk; averaged over
/// chunks. The trailing partial chunk is dropped.
template <typename T>
double cls(const Tensor<T>& a, std::size_t chunk_len, double threshold = 0.0) {
  check_contract(chunk_len >= 1, "cls: chunk_len must be >= 1");
  check_contract(a.rows() >= chunk_len, "cls: sequence shorter than chunk");
  const std::size_t n_chunks = a.rows() / chunk_len;
  const std::size_t ne = a.cols();
  double acc = 0.0;
  for (std::size_t c = 0; c < n_chunks; ++c) {
    std::size_t inactive = 0;
    for (std::size_t e = 0; e < ne; ++e) {
      bool any = false;
      for (std::size_t k = c * chunk_len; k < (c + 1) * chunk_len && !any; ++k)
        any = activated(a(k, e), threshold);
      if (!any) ++inactive;
    }
    acc += static_cast<double>(inactive) / static_cast<double>(ne);
  }
  return acc / static_cast<double>(n_chunks);
}

/// Mean fraction of a token's activated experts that the next token also
/// activates. Pairs whose first token activates nothing are skipped; if all
/// pairs are skipped the ratio is undefined.
template <typename T>
std::optional<double> reuse_ratio(const Tensor<T>& a, double threshold = 0.0) {
  check_contract(a.rows() >= 2, "reuse_ratio: need at least two tokens");
  double acc = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k + 1 < a.rows(); ++k) {
    std::size_t size_k = 0, shared = 0;
    for (std::size_t e = 0; e < a.cols(); ++e) {
      if (!activated(a(k, e), threshold)) continue;
      ++size_k;
      if (activated(a(k + 1, e), threshold)) ++shared;
    }
    if (size_k == 0) continue;
    acc += static_cast<double>(shared) / static_cast<double>(size_k);
    ++counted;
  }
  if (counted == 0) return std::nullopt;
  return acc / static_cast<double>(counted);
}

/// 1 - |union of activated sets| / N_e over an arbitrary token set.
template <typename T>
double union_sparsity(const Tensor<T>& a, double threshold = 0.0) {
  check_contract(a.rows() >= 1, "union_sparsity: need at least one token");
  std::size_t covered = 0;
  for (std::size_t e = 0; e < a.cols(); ++e) {
    bool any = false;
    for (std::size_t k = 0; k < a.rows() && !any; ++k) any = activated(a(k, e), threshold);
    if (any) ++covered;
  }
  return 1.0 - static_cast<double>(covered) / static_cast<double>(a.cols());
}

/// Mean per-token L2 norm of the activation row.
template <typename T>
double activation_magnitude(const Tensor<T>& a) {
  check_contract(a.rows() >= 1, "activation_magnitude: need at least one token");
  double acc = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) {
      const double v = static_cast<double>(a(r, c));
      sq += v * v;
    }
    acc += std::sqrt(sq);
  }
  return acc / static_cast<double>(a.rows());
}

struct AllocationEntry {
  std::size_t frequency = 0;
  double mean_active_ratio = 0.0;
};

/// Per-vocabulary-token occurrence count and mean activated-expert ratio.
struct AllocationHistogram {
  std::map<int, AllocationEntry> entries;
  std::size_t total_tokens = 0;
};

template <typename T>
AllocationHistogram allocation_histogram(std::span<const int> token_ids, const Tensor<T>& a,
                                         double threshold = 0.0) {
  check_contract(token_ids.size() == a.rows(), "allocation_histogram: ids/rows mismatch");
  AllocationHistogram h;
  h.total_tokens = token_ids.size();
  std::map<int, double> ratio_sum;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::size_t active = 0;
    for (std::size_t e = 0; e < a.cols(); ++e)
      if (activated(a(r, e), threshold)) ++active;
    auto& entry = h.entries[token_ids[r]];
    ++entry.frequency;
    ratio_sum[token_ids[r]] += static_cast<double>(active) / static_cast<double>(a.cols());
  }
  for (auto& [id, entry] : h.entries)
    entry.mean_active_ratio = ratio_sum[id] / static_cast<double>(entry.frequency);
  return h;
}

/// Aggregated measurement over a dataset / model.
struct SparsityReport {
  double tls = 0.0;
  std::map<std::size_t, double> cls;  // chunk length -> sparsity
  std::optional<double> reuse_ratio;
  std::optional<double> union_sparsity;
  std::size_t token_count = 0;
};

/// Streaming accumulator so reports can pool many sequences / layers without
/// concatenating activations. Chunk- and pair-level terms are weighted by
/// their counts, matching a single concatenated evaluation per sequence.
class SparsityAccumulator {
 public:
  explicit SparsityAccumulator(std::vector<std::size_t> cls_lengths, double threshold = 0.0)
      : cls_lengths_(std::move(cls_lengths)), threshold_(threshold) {}

  template <typename T>
  void add_sequence(const Tensor<T>& a) {
    tls_sum_ += tls(a, threshold_) * static_cast<double>(a.rows());
    token_count_ += a.rows();
    for (std::size_t len : cls_lengths_) {
      if (a.rows() < len) continue;
      const std::size_t chunks = a.rows() / len;
      cls_sum_[len] += cls(a, len, threshold_) * static_cast<double>(chunks);
      cls_chunks_[len] += chunks;
    }
    if (a.rows() >= 2) {
      for (std::size_t k = 0; k + 1 < a.rows(); ++k) {
        std::size_t size_k = 0, shared = 0;
        for (std::size_t e = 0; e < a.cols(); ++e) {
          if (!activated(a(k, e), threshold_)) continue;
          ++size_k;
          if (activated(a(k + 1, e), threshold_)) ++shared;
        }
        if (size_k == 0) continue;
        reuse_sum_ += static_cast<double>(shared) / static_cast<double>(size_k);
        ++reuse_pairs_;
      }
    }
  }

  SparsityReport report() const {
    SparsityReport r;
    r.token_count = token_count_;
    if (token_count_ > 0) r.tls = tls_sum_ / static_cast<double>(token_count_);
    for (const auto& [len, sum] : cls_sum_)
      if (cls_chunks_.at(len) > 0) r.cls[len] = sum / static_cast<double>(cls_chunks_.at(len));
    if (reuse_pairs_ > 0) r.reuse_ratio = reuse_sum_ / static_cast<double>(reuse_pairs_);
    return r;
  }

 private:
  std::vector<std::size_t> cls_lengths_;
  double threshold_;
  double tls_sum_ = 0.0;
  std::size_t token_count_ = 0;
  std::map<std::size_t, double> cls_sum_;
  std::map<std::size_t, std::size_t> cls_chunks_;
  double reuse_sum_ = 0.0;
  std::size_t reuse_pairs_ = 0;
};

}  // namespace chunkmoe
