// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "chunkmoe/chunk_kernel.hpp"
#include "chunkmoe/ffn.hpp"
#include "chunkmoe/tape.hpp"
#include "chunkmoe/tensor.hpp"

namespace chunkmoe {

inline constexpr int kByteVocab = 256;
inline constexpr int kBosToken = 256;           // single special token
inline constexpr std::size_t kVocabSize = 257;  // bytes + BOS

/// Toy byte-level causal LM: token+position embeddings, pre-norm causal
/// multi-head attention, and one sparse FFN layer per block.
struct ModelConfig {
  FfnConfig ffn;
  std::size_t n_layers = 2;
  std::size_t vocab = kVocabSize;
  std::size_t ctx = 128;
  std::size_t n_heads = 4;

  void validate() const {
    ffn.validate();
    check_config(n_layers >= 1, "model: n_layers must be >= 1");
    check_config(vocab >= 2, "model: vocab must be >= 2");
    check_config(ctx >= 2, "model: ctx must be >= 2");
    check_config(n_heads >= 1 && ffn.d_h % n_heads == 0,
                 "model: n_heads must divide d_h");
  }
};

template <typename T>
struct LayerParams {
  Tensor<T> attn_gain;             // [1 x d_h]
  Tensor<T> wq, wk, wv, wo;        // [d_h x d_h]
  Tensor<T> ffn_gain;              // [1 x d_h]
  FfnParams<T> ffn;
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  Tensor<T> tok_emb;     // [vocab x d_h]
  Tensor<T> pos_emb;     // [ctx x d_h]
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_gain;  // [1 x d_h]
  Tensor<T> lm_head;     // [d_h x vocab]

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.ffn.d_h;
    ModelParams p;
    p.cfg = cfg;
    p.tok_emb = randn_fanin<T>(cfg.vocab, d, d, rng);
    p.pos_emb = randn_fanin<T>(cfg.ctx, d, d, rng);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      LayerParams<T> layer;
      layer.attn_gain = Tensor<T>::full(1, d, T{1});
      layer.wq = randn_fanin<T>(d, d, d, rng);
      layer.wk = randn_fanin<T>(d, d, d, rng);
      layer.wv = randn_fanin<T>(d, d, d, rng);
      layer.wo = randn_fanin<T>(d, d, d, rng);
      layer.ffn_gain = Tensor<T>::full(1, d, T{1});
      layer.ffn = FfnParams<T>::init(cfg.ffn, rng);
      p.layers.push_back(std::move(layer));
    }
    p.final_gain = Tensor<T>::full(1, d, T{1});
    p.lm_head = randn_fanin<T>(d, cfg.vocab, d, rng);
    return p;
  }

  /// Visits every learnable tensor in a fixed order (the checkpoint and
  /// optimizer ordering).
  template <typename F>
  void for_each_param(F&& f) {
    f("tok_emb", tok_emb);
    f("pos_emb", pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      LayerParams<T>& layer = layers[l];
      f(prefix + "attn_gain", layer.attn_gain);
      f(prefix + "wq", layer.wq);
      f(prefix + "wk", layer.wk);
      f(prefix + "wv", layer.wv);
      f(prefix + "wo", layer.wo);
      f(prefix + "ffn_gain", layer.ffn_gain);
      f(prefix + "ffn.w_router", layer.ffn.w_router);
      if (cfg.ffn.router == RouterKind::relu_rmsnorm)
        f(prefix + "ffn.router_gain", layer.ffn.router_gain);
      for (std::size_t e = 0; e < cfg.ffn.n_experts; ++e) {
        const std::string ep = prefix + "ffn.expert" + std::to_string(e) + ".";
        f(ep + "w_up", layer.ffn.w_up[e]);
        f(ep + "w_down", layer.ffn.w_down[e]);
        if (cfg.ffn.expert == ExpertKind::gated_swish) f(ep + "w_gate", layer.ffn.w_gate[e]);
      }
    }
    f("final_gain", final_gain);
    f("lm_head", lm_head);
  }
};

// ---------------------------------------------------------------------------
// Training forward (tape).
// ---------------------------------------------------------------------------

template <typename T>
struct ModelTapeIds {
  using Id = typename Tape<T>::Id;
  Id tok_emb = 0, pos_emb = 0, final_gain = 0, lm_head = 0;
  struct Layer {
    Id attn_gain = 0, wq = 0, wk = 0, wv = 0, wo = 0, ffn_gain = 0;
    FfnParamIds<T> ffn;
  };
  std::vector<Layer> layers;
  std::vector<std::pair<std::string, Id>> named;  // for_each_param order
};

template <typename T>
ModelTapeIds<T> model_params_to_tape(Tape<T>& tape, ModelParams<T>& params) {
  ModelTapeIds<T> ids;
  ids.tok_emb = tape.leaf(params.tok_emb);
  ids.pos_emb = tape.leaf(params.pos_emb);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    typename ModelTapeIds<T>::Layer layer;
    layer.attn_gain = tape.leaf(params.layers[l].attn_gain);
    layer.wq = tape.leaf(params.layers[l].wq);
    layer.wk = tape.leaf(params.layers[l].wk);
    layer.wv = tape.leaf(params.layers[l].wv);
    layer.wo = tape.leaf(params.layers[l].wo);
    layer.ffn_gain = tape.leaf(params.layers[l].ffn_gain);
    layer.ffn = ffn_params_to_tape(tape, params.layers[l].ffn, params.cfg.ffn);
    ids.layers.push_back(layer);
  }
  ids.final_gain = tape.leaf(params.final_gain);
  ids.lm_head = tape.leaf(params.lm_head);

  // Mirror for_each_param so gradients can be pulled in checkpoint order.
  ids.named.emplace_back("tok_emb", ids.tok_emb);
  ids.named.emplace_back("pos_emb", ids.pos_emb);
  for (std::size_t l = 0; l < ids.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    const auto& layer = ids.layers[l];
    ids.named.emplace_back(prefix + "attn_gain", layer.attn_gain);
    ids.named.emplace_back(prefix + "wq", layer.wq);
    ids.named.emplace_back(prefix + "wk", layer.wk);
    ids.named.emplace_back(prefix + "wv", layer.wv);
    ids.named.emplace_back(prefix + "wo", layer.wo);
    ids.named.emplace_back(prefix + "ffn_gain", layer.ffn_gain);
    ids.named.emplace_back(prefix + "ffn.w_router", layer.ffn.w_router);
    if (layer.ffn.has_gain)
      ids.named.emplace_back(prefix + "ffn.router_gain", layer.ffn.router_gain);
    for (std::size_t e = 0; e < layer.ffn.w_up.size(); ++e) {
      const std::string ep = prefix + "ffn.expert" + std::to_string(e) + ".";
      ids.named.emplace_back(ep + "w_up", layer.ffn.w_up[e]);
      ids.named.emplace_back(ep + "w_down", layer.ffn.w_down[e]);
      if (!layer.ffn.w_gate.empty())
        ids.named.emplace_back(ep + "w_gate", layer.ffn.w_gate[e]);
    }
  }
  ids.named.emplace_back("final_gain", ids.final_gain);
  ids.named.emplace_back("lm_head", ids.lm_head);
  return ids;
}

/// Causal multi-head attention over a batch of equal-length sequences laid
/// out as consecutive row blocks.
template <typename T>
typename Tape<T>::Id attention_tape(Tape<T>& tape, typename Tape<T>::Id x,
                                    const typename ModelTapeIds<T>::Layer& layer,
                                    std::size_t seq_len, std::size_t n_heads) {
  using Id = typename Tape<T>::Id;
  const std::size_t rows = tape.value(x).rows();
  const std::size_t d = tape.value(x).cols();
  const std::size_t n_seq = rows / seq_len;
  const std::size_t hd = d / n_heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(hd));
  Id q = tape.matmul(x, layer.wq);
  Id k = tape.matmul(x, layer.wk);
  Id v = tape.matmul(x, layer.wv);
  std::vector<Id> seq_outs;
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t r0 = s * seq_len, r1 = (s + 1) * seq_len;
    Id qs = tape.slice_rows(q, r0, r1);
    Id ks = tape.slice_rows(k, r0, r1);
    Id vs = tape.slice_rows(v, r0, r1);
    std::vector<Id> head_outs;
    for (std::size_t h = 0; h < n_heads; ++h) {
      Id qh = tape.slice_cols(qs, h * hd, (h + 1) * hd);
      Id kh = tape.slice_cols(ks, h * hd, (h + 1) * hd);
      Id vh = tape.slice_cols(vs, h * hd, (h + 1) * hd);
      Id scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt);
      Id weights = tape.causal_softmax(scores);
      head_outs.push_back(tape.matmul(weights, vh));
    }
    seq_outs.push_back(tape.stack_cols(head_outs));
  }
  Id merged = n_seq == 1 ? seq_outs[0] : tape.stack_rows(seq_outs);
  return tape.matmul(merged, layer.wo);
}

template <typename T>
struct ModelTapeForward {
  typename Tape<T>::Id logits = 0;
  std::vector<RouterIds<T>> routers;  // per layer
};

/// Forward over a batch of sequences (tokens.size() = n_seq * seq_len; each
/// sequence starts at position 0).
template <typename T>
ModelTapeForward<T> model_forward_tape(Tape<T>& tape, const ModelTapeIds<T>& ids,
                                       const ModelConfig& cfg, std::span<const int> tokens,
                                       std::size_t seq_len) {
  using Id = typename Tape<T>::Id;
  check_contract(seq_len >= 1 && seq_len <= cfg.ctx, "model: seq_len must be in [1, ctx]");
  check_contract(tokens.size() % seq_len == 0, "model: tokens not a multiple of seq_len");
  const std::size_t n_seq = tokens.size() / seq_len;
  std::vector<int> tok_ids(tokens.begin(), tokens.end());
  std::vector<int> pos_ids(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) pos_ids[i] = static_cast<int>(i % seq_len);

  ModelTapeForward<T> out;
  Id x = tape.add(tape.gather_rows(ids.tok_emb, std::move(tok_ids)),
                  tape.gather_rows(ids.pos_emb, std::move(pos_ids)));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& layer = ids.layers[l];
    Id normed = tape.rmsnorm_rows(x, layer.attn_gain);
    Id attn = attention_tape(tape, normed, layer, seq_len, cfg.n_heads);
    x = tape.add(x, attn);
    Id normed2 = tape.rmsnorm_rows(x, layer.ffn_gain);
    FfnTapeResult<T> ffn = ffn_forward_tape(tape, normed2, layer.ffn, cfg.ffn);
    out.routers.push_back(ffn.router);
    x = tape.add(x, ffn.y);
  }
  Id final_norm = tape.rmsnorm_rows(x, ids.final_gain);
  out.logits = tape.matmul(final_norm, ids.lm_head);
  (void)n_seq;
  return out;
}

// ---------------------------------------------------------------------------
// Inference forward (plain). Mirrors the tape path op for op; the FFN runs
// through the chunk kernel.
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardTrace {
  Tensor<T> logits;
  std::vector<RouterActivations<T>> acts;   // per layer, all rows
  std::vector<ChunkUnionPlan> chunk_plans;  // per layer, verification-chunk rows
  std::vector<CostReport> chunk_costs;      // per layer, verification-chunk rows
};

namespace detail {

template <typename T>
Tensor<T> causal_softmax_plain(const Tensor<T>& s) {
  const std::size_t L = s.rows();
  Tensor<T> out(L, L);
  for (std::size_t i = 0; i < L; ++i) {
    T mx = s(i, 0);
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
    T sum{0};
    for (std::size_t j = 0; j <= i; ++j) {
      out(i, j) = std::exp(s(i, j) - mx);
      sum += out(i, j);
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j <= i; ++j) out(i, j) *= inv;
  }
  return out;
}

template <typename T>
Tensor<T> attention_plain(const Tensor<T>& x, const LayerParams<T>& layer, std::size_t n_heads) {
  const std::size_t L = x.rows();
  const std::size_t d = x.cols();
  const std::size_t hd = d / n_heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(hd));
  Tensor<T> q = matmul(x, layer.wq);
  Tensor<T> k = matmul(x, layer.wk);
  Tensor<T> v = matmul(x, layer.wv);
  Tensor<T> merged(L, d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor<T> qh(L, hd), kh(L, hd), vh(L, hd);
    for (std::size_t r = 0; r < L; ++r)
      for (std::size_t c = 0; c < hd; ++c) {
        qh(r, c) = q(r, h * hd + c);
        kh(r, c) = k(r, h * hd + c);
        vh(r, c) = v(r, h * hd + c);
      }
    Tensor<T> weights = causal_softmax_plain(scale(matmul_nt(qh, kh), inv_sqrt));
    Tensor<T> oh = matmul(weights, vh);
    for (std::size_t r = 0; r < L; ++r)
      for (std::size_t c = 0; c < hd; ++c) merged(r, h * hd + c) = oh(r, c);
  }
  return matmul(merged, layer.wo);
}

/// Dense Eq.-1 application for activations already computed; handles both
/// expert kinds (the sparse kernel handles non-gated only).
template <typename T>
Tensor<T> ffn_apply_dense(const Tensor<T>& x, const FfnParams<T>& params, const FfnConfig& cfg,
                          const Tensor<T>& a) {
  if (cfg.expert == ExpertKind::nongated_swish)
    return dense_chunk_ffn_reference(x, params, cfg, a);
  Tensor<T> y(x.rows(), cfg.d_h);
  for (std::size_t e = 0; e < cfg.n_experts; ++e) {
    Tensor<T> out = expert_forward(x, params, cfg, e);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const T w = a(r, e);
      for (std::size_t c = 0; c < cfg.d_h; ++c) y(r, c) += w * out(r, c);
    }
  }
  return y;
}

}  // namespace detail

inline constexpr std::size_t kNoChunk = static_cast<std::size_t>(-1);

/// Plain forward for evaluation and decoding. When chunk_start is set, rows
/// [chunk_start, len) form the verification chunk: their FFN output comes
/// from sparse_chunk_ffn over the chunk's expert union and their plan/cost
/// is recorded per layer. Earlier rows stand in for cached context and run
/// the dense reference (uncounted). Both paths agree bitwise, so logits do
/// not depend on chunk_start.
template <typename T>
ForwardTrace<T> model_forward(const ModelParams<T>& params, std::span<const int> tokens,
                              std::size_t chunk_start = kNoChunk) {
  const ModelConfig& cfg = params.cfg;
  const std::size_t L = tokens.size();
  check_contract(L >= 1 && L <= cfg.ctx, "model_forward: sequence length out of range");
  const bool chunked = chunk_start != kNoChunk;
  if (chunked) {
    check_contract(chunk_start < L, "model_forward: chunk_start out of range");
    check_contract(cfg.ffn.expert == ExpertKind::nongated_swish,
                   "model_forward: chunked path requires non-gated experts");
  }

  ForwardTrace<T> trace;
  Tensor<T> x(L, cfg.ffn.d_h);
  for (std::size_t r = 0; r < L; ++r) {
    const int id = tokens[r];
    check_contract(id >= 0 && static_cast<std::size_t>(id) < cfg.vocab,
                   "model_forward: token id out of range");
    for (std::size_t c = 0; c < cfg.ffn.d_h; ++c)
      x(r, c) = params.tok_emb(id, c) + params.pos_emb(r, c);
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerParams<T>& layer = params.layers[l];
    Tensor<T> normed = rmsnorm_rows(x, layer.attn_gain.flat());
    Tensor<T> attn = detail::attention_plain(normed, layer, cfg.n_heads);
    x = add(x, attn);
    Tensor<T> normed2 = rmsnorm_rows(x, layer.ffn_gain.flat());
    RouterActivations<T> acts = router_forward(normed2, layer.ffn, cfg.ffn);
    Tensor<T> y;
    if (!chunked) {
      y = detail::ffn_apply_dense(normed2, layer.ffn, cfg.ffn, acts.a);
    } else {
      y = Tensor<T>(L, cfg.ffn.d_h);
      if (chunk_start > 0) {
        Tensor<T> xp(chunk_start, cfg.ffn.d_h), ap(chunk_start, cfg.ffn.n_experts);
        for (std::size_t r = 0; r < chunk_start; ++r) {
          for (std::size_t c = 0; c < cfg.ffn.d_h; ++c) xp(r, c) = normed2(r, c);
          for (std::size_t c = 0; c < cfg.ffn.n_experts; ++c) ap(r, c) = acts.a(r, c);
        }
        Tensor<T> yp = dense_chunk_ffn_reference(xp, layer.ffn, cfg.ffn, ap);
        for (std::size_t r = 0; r < chunk_start; ++r)
          for (std::size_t c = 0; c < cfg.ffn.d_h; ++c) y(r, c) = yp(r, c);
      }
      const std::size_t nc = L - chunk_start;
      Tensor<T> xc(nc, cfg.ffn.d_h), ac(nc, cfg.ffn.n_experts);
      for (std::size_t r = 0; r < nc; ++r) {
        for (std::size_t c = 0; c < cfg.ffn.d_h; ++c) xc(r, c) = normed2(chunk_start + r, c);
        for (std::size_t c = 0; c < cfg.ffn.n_experts; ++c)
          ac(r, c) = acts.a(chunk_start + r, c);
      }
      ChunkUnionPlan plan = build_union_plan(ac);
      Tensor<T> yc = sparse_chunk_ffn(xc, layer.ffn, cfg.ffn, plan, ac);
      for (std::size_t r = 0; r < nc; ++r)
        for (std::size_t c = 0; c < cfg.ffn.d_h; ++c) y(chunk_start + r, c) = yc(r, c);
      trace.chunk_costs.push_back(cost_accounting(plan, cfg.ffn, sizeof(T)));
      trace.chunk_plans.push_back(std::move(plan));
    }
    trace.acts.push_back(std::move(acts));
    x = add(x, y);
  }
  Tensor<T> final_norm = rmsnorm_rows(x, params.final_gain.flat());
  trace.logits = matmul(final_norm, params.lm_head);
  return trace;
}

/// Greedy argmax with lowest-index tie break.
template <typename T>
int argmax_row(const Tensor<T>& logits, std::size_t row) {
  int best = 0;
  T bv = logits(row, 0);
  for (std::size_t c = 1; c < logits.cols(); ++c)
    if (logits(row, c) > bv) {
      bv = logits(row, c);
      best = static_cast<int>(c);
    }
  return best;
}

}  // namespace chunkmoe
