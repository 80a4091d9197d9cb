// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "chunkmoe/model.hpp"

namespace chunkmoe {

// ---------------------------------------------------------------------------
// Draft proposers.
// ---------------------------------------------------------------------------

enum class DraftPolicy {
  self_greedy,  // target model drafts for itself (oracle draft, upper bound)
  ngram,        // order-k table from a training corpus
  random_draft, // uniform random bytes (lower bound)
};

inline DraftPolicy parse_policy(const std::string& s) {
  if (s == "self_greedy") return DraftPolicy::self_greedy;
  if (s == "ngram") return DraftPolicy::ngram;
  if (s == "random") return DraftPolicy::random_draft;
  throw ConfigError("spec_decode: unknown draft policy: " + s);
}

inline const char* to_string(DraftPolicy p) {
  switch (p) {
    case DraftPolicy::self_greedy: return "self_greedy";
    case DraftPolicy::ngram: return "ngram";
    case DraftPolicy::random_draft: return "random";
  }
  return "?";
}

/// Greedy order-3 table with backoff to order-2, order-1, then the corpus
/// mode. Ties resolve to the smallest token id.
class NgramTable {
 public:
  static NgramTable build(std::span<const int> corpus) {
    NgramTable t;
    std::unordered_map<std::uint64_t, std::unordered_map<int, std::size_t>> c3, c2;
    std::unordered_map<int, std::size_t> c1;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      ++c1[corpus[i]];
      if (i + 1 < corpus.size()) ++c2[key1(corpus[i])][corpus[i + 1]];
      if (i + 2 < corpus.size()) ++c3[key2(corpus[i], corpus[i + 1])][corpus[i + 2]];
    }
    for (const auto& [k, counts] : c3) t.best3_[k] = argmax_count(counts);
    for (const auto& [k, counts] : c2) t.best2_[k] = argmax_count(counts);
    if (!c1.empty()) t.best1_ = argmax_count(c1);
    return t;
  }

  int propose(std::span<const int> context) const {
    const std::size_t m = context.size();
    if (m >= 2) {
      const auto it = best3_.find(key2(context[m - 2], context[m - 1]));
      if (it != best3_.end()) return it->second;
    }
    if (m >= 1) {
      const auto it = best2_.find(key1(context[m - 1]));
      if (it != best2_.end()) return it->second;
    }
    return best1_;
  }

 private:
  static std::uint64_t key1(int a) { return static_cast<std::uint64_t>(a); }
  static std::uint64_t key2(int a, int b) {
    return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint64_t>(b);
  }
  static int argmax_count(const std::unordered_map<int, std::size_t>& counts) {
    int best = -1;
    std::size_t bc = 0;
    for (const auto& [tok, c] : counts)
      if (c > bc || (c == bc && (best < 0 || tok < best))) {
        bc = c;
        best = tok;
      }
    return best;
  }

  std::unordered_map<std::uint64_t, int> best3_, best2_;
  int best1_ = 0;
};

struct DraftBatch {
  std::vector<int> context;
  std::vector<int> drafts;
};

/// Proposes n draft tokens after `context`. self_greedy runs the target
/// model autoregressively (its compute is the drafter's, not counted in
/// verification stats); ngram needs a table; random needs an RNG.
inline DraftBatch propose_drafts(std::span<const int> context, DraftPolicy policy, std::size_t n,
                                 const ModelParams<float>* model = nullptr,
                                 const NgramTable* ngram = nullptr,
                                 std::mt19937_64* rng = nullptr) {
  check_contract(!context.empty(), "propose_drafts: context must be non-empty");
  check_contract(n >= 1, "propose_drafts: n must be >= 1");
  DraftBatch batch;
  batch.context.assign(context.begin(), context.end());
  std::vector<int> extended(context.begin(), context.end());
  for (std::size_t j = 0; j < n; ++j) {
    int next = 0;
    switch (policy) {
      case DraftPolicy::self_greedy: {
        check_contract(model != nullptr, "propose_drafts: self_greedy requires the model");
        const ForwardTrace<float> trace = model_forward(*model, extended);
        next = argmax_row(trace.logits, extended.size() - 1);
        break;
      }
      case DraftPolicy::ngram: {
        check_contract(ngram != nullptr, "propose_drafts: ngram requires a table");
        next = ngram->propose(extended);
        break;
      }
      case DraftPolicy::random_draft: {
        check_contract(rng != nullptr, "propose_drafts: random requires an RNG");
        next = static_cast<int>((*rng)() % kByteVocab);
        break;
      }
    }
    batch.drafts.push_back(next);
    extended.push_back(next);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Verification.
// ---------------------------------------------------------------------------

struct VerifyResult {
  std::size_t accepted_drafts = 0;     // longest matching draft prefix
  std::vector<int> emitted;            // accepted drafts, plus the correction
                                       // token when not all drafts matched
  std::uint64_t chunk_union_bytes = 0; // expert weight bytes, union model
  std::uint64_t chunk_dense_bytes = 0; // expert weight bytes, all experts
  double mean_union_density = 0.0;     // over layers
};

/// One chunk pass over context+drafts whose FFN layers run through
/// sparse_chunk_ffn restricted to the drafts' expert union; greedy
/// acceptance of the longest matching prefix. The emitted tokens always
/// extend the target's own greedy continuation.
inline VerifyResult verify_chunk(const ModelParams<float>& model, const DraftBatch& batch) {
  const std::size_t m = batch.context.size();
  const std::size_t n = batch.drafts.size();
  check_contract(m >= 1 && n >= 1, "verify_chunk: empty context or drafts");
  check_contract(m + n <= model.cfg.ctx, "verify_chunk: context window exhausted");
  std::vector<int> tokens = batch.context;
  tokens.insert(tokens.end(), batch.drafts.begin(), batch.drafts.end());

  const ForwardTrace<float> trace = model_forward(model, tokens, /*chunk_start=*/m);

  VerifyResult res;
  for (const CostReport& c : trace.chunk_costs) {
    res.chunk_union_bytes += c.expert_weight_bytes_touched;
    res.chunk_dense_bytes += c.dense_expert_weight_bytes;
    res.mean_union_density += c.union_density;
  }
  if (!trace.chunk_costs.empty())
    res.mean_union_density /= static_cast<double>(trace.chunk_costs.size());

  std::size_t accepted = 0;
  while (accepted < n) {
    const int target = argmax_row(trace.logits, m - 1 + accepted);
    if (batch.drafts[accepted] != target) break;
    ++accepted;
  }
  res.accepted_drafts = accepted;
  res.emitted.assign(batch.drafts.begin(), batch.drafts.begin() + accepted);
  if (accepted < n) res.emitted.push_back(argmax_row(trace.logits, m - 1 + accepted));
  return res;
}

// ---------------------------------------------------------------------------
// Decode loops.
// ---------------------------------------------------------------------------

struct DecodeStats {
  std::vector<std::size_t> accepted_lengths;  // tokens emitted per verification step
  std::size_t tokens_generated = 0;
  std::uint64_t counted_ffn_bytes = 0;
  std::uint64_t counted_ffn_bytes_dense_equivalent = 0;
  std::size_t steps = 0;

  double mean_accepted_length() const {
    if (accepted_lengths.empty()) return 0.0;
    double s = 0.0;
    for (const std::size_t v : accepted_lengths) s += static_cast<double>(v);
    return s / static_cast<double>(accepted_lengths.size());
  }

  double median_accepted_length() const {
    if (accepted_lengths.empty()) return 0.0;
    std::vector<std::size_t> sorted = accepted_lengths;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t h = sorted.size() / 2;
    if (sorted.size() % 2 == 1) return static_cast<double>(sorted[h]);
    return (static_cast<double>(sorted[h - 1]) + static_cast<double>(sorted[h])) / 2.0;
  }

  double tokens_per_counted_gb() const {
    if (counted_ffn_bytes == 0) return 0.0;
    return static_cast<double>(tokens_generated) /
           (static_cast<double>(counted_ffn_bytes) / 1e9);
  }
};

struct DecodeResult {
  std::vector<int> generated;  // new tokens only
  DecodeStats stats;
};

/// Draft/verify loop. Weight-byte accounting: each verification step loads
/// the per-layer expert unions once; the dense equivalent charges every
/// emitted token one full expert sweep per layer (the AR baseline).
inline DecodeResult decode_loop(const ModelParams<float>& model, DraftPolicy policy,
                                std::span<const int> prompt_bytes, std::size_t max_tokens,
                                std::size_t n, const NgramTable* ngram = nullptr,
                                std::uint64_t draft_seed = 1234) {
  check_contract(n >= 1, "decode_loop: n must be >= 1");
  std::vector<int> tokens;
  tokens.push_back(kBosToken);
  tokens.insert(tokens.end(), prompt_bytes.begin(), prompt_bytes.end());
  std::mt19937_64 rng(draft_seed);

  DecodeResult out;
  while (out.stats.tokens_generated < max_tokens) {
    const std::size_t n_eff = std::min(n, max_tokens - out.stats.tokens_generated);
    check_contract(tokens.size() + n_eff <= model.cfg.ctx,
                   "decode_loop: context window exhausted");
    const DraftBatch batch =
        propose_drafts(tokens, policy, n_eff, &model, ngram, &rng);
    const VerifyResult v = verify_chunk(model, batch);
    tokens.insert(tokens.end(), v.emitted.begin(), v.emitted.end());
    out.generated.insert(out.generated.end(), v.emitted.begin(), v.emitted.end());
    out.stats.accepted_lengths.push_back(v.emitted.size());
    out.stats.tokens_generated += v.emitted.size();
    out.stats.counted_ffn_bytes += v.chunk_union_bytes;
    out.stats.counted_ffn_bytes_dense_equivalent +=
        static_cast<std::uint64_t>(v.emitted.size()) * v.chunk_dense_bytes;
    ++out.stats.steps;
  }
  return out;
}

/// Plain greedy autoregressive decoding through the 1-token sparse path,
/// with the same byte accounting (every step loads that token's expert
/// union once).
inline DecodeResult greedy_ar_decode(const ModelParams<float>& model,
                                     std::span<const int> prompt_bytes,
                                     std::size_t max_tokens) {
  std::vector<int> tokens;
  tokens.push_back(kBosToken);
  tokens.insert(tokens.end(), prompt_bytes.begin(), prompt_bytes.end());
  DecodeResult out;
  while (out.stats.tokens_generated < max_tokens) {
    check_contract(tokens.size() + 1 <= model.cfg.ctx, "greedy_ar_decode: context exhausted");
    const ForwardTrace<float> trace =
        model_forward(model, tokens, /*chunk_start=*/tokens.size() - 1);
    const int next = argmax_row(trace.logits, tokens.size() - 1);
    tokens.push_back(next);
    out.generated.push_back(next);
    ++out.stats.tokens_generated;
    out.stats.accepted_lengths.push_back(1);
    for (const CostReport& c : trace.chunk_costs) {
      out.stats.counted_ffn_bytes += c.expert_weight_bytes_touched;
      out.stats.counted_ffn_bytes_dense_equivalent += c.dense_expert_weight_bytes;
    }
    ++out.stats.steps;
  }
  return out;
}

}  // namespace chunkmoe
