// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "chunkmoe/checkpoint.hpp"
#include "chunkmoe/config.hpp"
#include "chunkmoe/data.hpp"
#include "chunkmoe/metrics.hpp"
#include "chunkmoe/model.hpp"
#include "chunkmoe/objectives.hpp"

namespace chunkmoe {

// ---------------------------------------------------------------------------
// Optimizer (AdamW, decoupled weight decay) + global-norm clipping.
// ---------------------------------------------------------------------------

class AdamW {
 public:
  AdamW(const OptimConfig& cfg, const std::vector<std::pair<std::string, Tensor<float>*>>& params)
      : cfg_(cfg) {
    for (const auto& [name, t] : params) {
      m_.emplace_back(t->rows(), t->cols());
      v_.emplace_back(t->rows(), t->cols());
    }
  }

  /// Clips the gradient set to cfg.clip_norm (global L2) and applies one
  /// AdamW step at learning rate lr.
  void step(std::vector<Tensor<float>*>& params, std::vector<Tensor<float>>& grads, double lr) {
    check_contract(params.size() == m_.size() && grads.size() == m_.size(),
                   "adamw: parameter count mismatch");
    double sq = 0.0;
    for (const auto& g : grads)
      for (const float v : g.flat()) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    const double clip =
        cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->flat();
      auto g = grads[i].flat();
      auto m = m_[i].flat();
      auto v = v_[i].flat();
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = static_cast<double>(g[j]) * clip;
        const double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        m[j] = static_cast<float>(mj);
        v[j] = static_cast<float>(vj);
        const double update = (mj / bc1) / (std::sqrt(vj / bc2) + 1e-8) +
                              cfg_.weight_decay * static_cast<double>(p[j]);
        p[j] = static_cast<float>(static_cast<double>(p[j]) - lr * update);
      }
    }
  }

  std::uint64_t steps_taken() const { return t_; }

 private:
  OptimConfig cfg_;
  std::vector<Tensor<float>> m_, v_;
  std::uint64_t t_ = 0;
};

/// Warmup-stable-decay schedule: linear warmup to the peak, constant
/// plateau, linear decay toward zero over the final decay_steps.
inline double wsd_lr(const OptimConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr_peak * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  if (cfg.decay_steps > 0 && step >= total_steps - cfg.decay_steps)
    return cfg.lr_peak * static_cast<double>(total_steps - step) /
           static_cast<double>(cfg.decay_steps);
  return cfg.lr_peak;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainResult {
  std::filesystem::path csv_path;
  std::filesystem::path ckpt_path;
  LossBundle final_losses;
  double final_lambda_cs = 0.0;
};

namespace detail {

inline std::string fmt_metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct BatchMetrics {
  double tls = 0.0, cls8 = 0.0;
  std::optional<double> reuse;
};

/// Pools TLS / CLS_8 / reuse over layers and batch sequences.
template <typename T>
BatchMetrics batch_metrics(const Tape<T>& tape, const std::vector<RouterIds<T>>& routers,
                           std::size_t seq_len) {
  SparsityAccumulator acc({8});
  for (const auto& r : routers) {
    const Tensor<T>& a = tape.value(r.a);
    const std::size_t n_seq = a.rows() / seq_len;
    for (std::size_t s = 0; s < n_seq; ++s) {
      Tensor<T> slice(seq_len, a.cols());
      for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t c = 0; c < a.cols(); ++c) slice(i, c) = a(s * seq_len + i, c);
      acc.add_sequence(slice);
    }
  }
  const SparsityReport rep = acc.report();
  BatchMetrics m;
  m.tls = rep.tls;
  if (auto it = rep.cls.find(8); it != rep.cls.end()) m.cls8 = it->second;
  m.reuse = rep.reuse_ratio;
  return m;
}

}  // namespace detail

/// Runs the full training loop: per step a tape forward over a sampled
/// batch, loss composition per the objective config, backward, global-norm
/// clip, AdamW update with the WSD schedule, and the adaptive lambda
/// scheduler fed with the step's sparsifier loss. Logs the CSV schema
/// `step,lr,L_lm,L_al,L_cs,lambda_cs,tls,cls8,reuse` every log_interval
/// steps. A non-finite loss aborts with a diagnostic checkpoint.
inline TrainResult train(const TrainConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  check_config(!cfg.data.corpus.empty(), "train: data.corpus is required");
  const std::vector<int> corpus = ingest(cfg.data.corpus);
  const std::size_t ctx = cfg.model.ctx;
  check_config(corpus.size() >= ctx, "train: corpus shorter than the context window");

  std::filesystem::create_directories(cfg.data.out_dir);
  const std::filesystem::path out_dir(cfg.data.out_dir);

  ModelParams<float> params = ModelParams<float>::init(cfg.model, cfg.seed);
  std::vector<std::pair<std::string, Tensor<float>*>> named;
  params.for_each_param(
      [&](const std::string& name, Tensor<float>& t) { named.emplace_back(name, &t); });
  std::vector<Tensor<float>*> param_ptrs;
  for (auto& [name, t] : named) param_ptrs.push_back(t);
  AdamW opt(cfg.optim, named);

  const ObjectiveConfig& obj = cfg.objective;
  SchedulerState sched = SchedulerState::init(
      obj.sparsifier == Sparsifier::none ? 1.0 : obj.lambda0, obj.n_st, obj.n_adj,
      obj.gamma_min);

  std::mt19937_64 data_rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  const std::size_t max_start = corpus.size() - ctx;

  const std::filesystem::path csv_path = out_dir / "metrics.csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw IoError("train: cannot open " + csv_path.string());
  csv << "step,lr,L_lm,L_al,L_cs,lambda_cs,tls,cls8,reuse\n";

  TrainResult result;
  result.csv_path = csv_path;

  for (std::size_t step = 0; step < cfg.data.steps; ++step) {
    // Batch of BOS-prefixed windows.
    std::vector<int> tokens(cfg.data.batch * ctx), targets(cfg.data.batch * ctx);
    for (std::size_t b = 0; b < cfg.data.batch; ++b) {
      const std::size_t start = max_start == 0 ? 0 : data_rng() % (max_start + 1);
      tokens[b * ctx] = kBosToken;
      for (std::size_t j = 1; j < ctx; ++j)
        tokens[b * ctx + j] = corpus[start + j - 1];
      for (std::size_t j = 0; j < ctx; ++j) targets[b * ctx + j] = corpus[start + j];
    }

    const double lr = wsd_lr(cfg.optim, step, cfg.data.steps);
    const double lambda_cs = obj.sparsifier == Sparsifier::none ? 0.0 : sched.lambda_cs;

    Tape<float> tape;
    LossBundle bundle;
    detail::BatchMetrics metrics;
    try {
      ModelTapeIds<float> ids = model_params_to_tape(tape, params);
      ModelTapeForward<float> fwd = model_forward_tape(tape, ids, cfg.model, tokens, ctx);
      using Id = Tape<float>::Id;
      Id lm = tape.cross_entropy(fwd.logits, targets);
      Id total = lm;

      const double inv_layers = 1.0 / static_cast<double>(cfg.model.n_layers);
      double l_al = 0.0, l_sp = 0.0, l_bal = 0.0;
      if (obj.al) {
        Id sum = 0;
        bool first = true;
        for (const auto& r : fwd.routers) {
          Id term = al_loss_op(tape, r.a0, obj.alpha, ctx, obj.al_detach_target);
          sum = first ? term : tape.add(sum, term);
          first = false;
        }
        Id mean = tape.scale(sum, static_cast<float>(inv_layers));
        l_al = tape.scalar(mean);
        total = tape.add(total, tape.scale(mean, static_cast<float>(obj.lambda_al)));
      }
      if (obj.sparsifier != Sparsifier::none) {
        Id sum = 0;
        bool first = true;
        for (const auto& r : fwd.routers) {
          Id term = 0;
          switch (obj.sparsifier) {
            case Sparsifier::cs: term = cs_loss_op(tape, r.a1, obj.chunk_len, ctx); break;
            case Sparsifier::l1: term = l1_loss_op(tape, r.a); break;
            case Sparsifier::ent: term = entropy_loss_op(tape, r.a1); break;
            case Sparsifier::none: break;
          }
          sum = first ? term : tape.add(sum, term);
          first = false;
        }
        Id mean = tape.scale(sum, static_cast<float>(inv_layers));
        l_sp = tape.scalar(mean);
        total = tape.add(total, tape.scale(mean, static_cast<float>(lambda_cs)));
      }
      if (obj.balance) {
        Id sum = 0;
        bool first = true;
        for (const auto& r : fwd.routers) {
          Id term = load_balance_op(tape, r.a1);
          sum = first ? term : tape.add(sum, term);
          first = false;
        }
        Id mean = tape.scale(sum, static_cast<float>(inv_layers));
        l_bal = tape.scalar(mean);
        total = tape.add(total, tape.scale(mean, static_cast<float>(obj.lambda_balance)));
      }

      bundle = total_loss(tape.scalar(lm), l_al, l_sp, obj.al ? obj.lambda_al : 0.0, lambda_cs,
                          l_bal, obj.balance ? obj.lambda_balance : 0.0);

      tape.backward(total);

      std::vector<Tensor<float>> grads;
      grads.reserve(ids.named.size());
      for (const auto& [name, id] : ids.named) grads.push_back(tape.grad(id));
      opt.step(param_ptrs, grads, lr);

      if (obj.sparsifier != Sparsifier::none) scheduler_step(sched, l_sp);

      const bool log_now =
          (step + 1) % cfg.data.log_interval == 0 || step + 1 == cfg.data.steps;
      if (log_now) {
        metrics = detail::batch_metrics(tape, fwd.routers, ctx);
        csv << step + 1 << ',' << detail::fmt_metric(lr) << ','
            << detail::fmt_metric(bundle.l_lm) << ',' << detail::fmt_metric(bundle.l_al) << ','
            << detail::fmt_metric(bundle.l_cs) << ',' << detail::fmt_metric(lambda_cs) << ','
            << detail::fmt_metric(metrics.tls) << ',' << detail::fmt_metric(metrics.cls8) << ','
            << detail::fmt_metric(metrics.reuse.value_or(
                   std::numeric_limits<double>::quiet_NaN()))
            << '\n';
        csv.flush();
        if (progress)
          (*progress) << "step " << step + 1 << " lm " << bundle.l_lm << " sp " << bundle.l_cs
                      << " lambda " << lambda_cs << " tls " << metrics.tls << " cls8 "
                      << metrics.cls8 << '\n';
      }
    } catch (const NumericError& e) {
      const auto diag = out_dir / "diagnostic_nan.ckpt";
      save_checkpoint(params, cfg, diag);
      throw NumericError(std::string("train: non-finite loss at step ") +
                         std::to_string(step + 1) + " (" + e.what() +
                         "); diagnostic checkpoint: " + diag.string());
    }

    if (cfg.data.ckpt_interval > 0 && (step + 1) % cfg.data.ckpt_interval == 0 &&
        step + 1 != cfg.data.steps) {
      save_checkpoint(params, cfg, out_dir / ("ckpt_" + std::to_string(step + 1) + ".ckpt"));
    }
    result.final_losses = bundle;
  }

  result.ckpt_path = out_dir / "ckpt_final.ckpt";
  save_checkpoint(params, cfg, result.ckpt_path);
  result.final_lambda_cs = obj.sparsifier == Sparsifier::none ? 0.0 : sched.lambda_cs;
  csv.close();
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation / measurement.
// ---------------------------------------------------------------------------

namespace detail {

/// Splits a byte stream into BOS-prefixed windows of at most ctx rows.
inline std::vector<std::vector<int>> eval_windows(const std::vector<int>& bytes,
                                                  std::size_t ctx) {
  std::vector<std::vector<int>> windows;
  for (std::size_t w = 0; w < bytes.size(); w += ctx) {
    const std::size_t m = std::min(ctx, bytes.size() - w);
    std::vector<int> inputs(m);
    inputs[0] = kBosToken;
    for (std::size_t j = 1; j < m; ++j) inputs[j] = bytes[w + j - 1];
    windows.push_back(std::move(inputs));
  }
  return windows;
}

inline double window_nll(const Tensor<float>& logits, const std::vector<int>& bytes,
                         std::size_t w_start, std::size_t rows) {
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int target = bytes[w_start + r];
    const float* in = logits.row(r);
    double mx = in[0];
    for (std::size_t c = 1; c < logits.cols(); ++c) mx = std::max(mx, (double)in[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) sum += std::exp((double)in[c] - mx);
    total += std::log(sum) + mx - (double)in[target];
  }
  return total;
}

}  // namespace detail

/// Everything a single pass over a dataset can measure.
struct ModelMeasurement {
  SparsityReport model_report;                  // pooled over layers
  std::vector<SparsityReport> layer_reports;    // per layer
  std::vector<double> layer_magnitudes;         // per layer, mean L2
  AllocationHistogram histogram;                // per token id, layer-averaged ratio
  double ppl = 0.0;
  std::size_t token_count = 0;
};

inline ModelMeasurement measure_model(const ModelParams<float>& params,
                                      const std::vector<int>& bytes,
                                      const std::vector<std::size_t>& cls_lengths = {1, 2, 4, 8,
                                                                                     16, 32}) {
  check_contract(!bytes.empty(), "measure_model: empty data");
  const ModelConfig& cfg = params.cfg;
  const std::size_t n_layers = cfg.n_layers;
  SparsityAccumulator pooled(cls_lengths);
  std::vector<SparsityAccumulator> per_layer(n_layers, SparsityAccumulator(cls_lengths));
  std::vector<double> mag_sum(n_layers, 0.0);
  std::size_t mag_windows = 0;
  double union32_sum = 0.0;
  std::size_t union32_count = 0;
  std::map<int, std::pair<std::size_t, double>> hist;  // id -> (freq, ratio sum)
  double nll = 0.0;
  std::size_t n_targets = 0;

  const auto windows = detail::eval_windows(bytes, cfg.ctx);
  std::size_t w_start = 0;
  for (const auto& inputs : windows) {
    const ForwardTrace<float> trace = model_forward(params, inputs);
    nll += detail::window_nll(trace.logits, bytes, w_start, inputs.size());
    n_targets += inputs.size();
    for (std::size_t l = 0; l < n_layers; ++l) {
      const Tensor<float>& a = trace.acts[l].a;
      pooled.add_sequence(a);
      per_layer[l].add_sequence(a);
      mag_sum[l] += activation_magnitude(a);
      for (std::size_t c0 = 0; c0 + 32 <= a.rows(); c0 += 32) {
        Tensor<float> chunk(32, a.cols());
        for (std::size_t r = 0; r < 32; ++r)
          for (std::size_t c = 0; c < a.cols(); ++c) chunk(r, c) = a(c0 + r, c);
        union32_sum += union_sparsity(chunk);
        ++union32_count;
      }
    }
    for (std::size_t r = 0; r < inputs.size(); ++r) {
      double ratio = 0.0;
      for (std::size_t l = 0; l < n_layers; ++l) {
        std::size_t active = 0;
        for (std::size_t e = 0; e < cfg.ffn.n_experts; ++e)
          if (activated(trace.acts[l].a(r, e), 0.0)) ++active;
        ratio += static_cast<double>(active) / static_cast<double>(cfg.ffn.n_experts);
      }
      auto& h = hist[inputs[r]];
      ++h.first;
      h.second += ratio / static_cast<double>(n_layers);
    }
    ++mag_windows;
    w_start += inputs.size();
  }

  ModelMeasurement m;
  m.model_report = pooled.report();
  if (union32_count > 0) m.model_report.union_sparsity = union32_sum / (double)union32_count;
  for (auto& acc : per_layer) m.layer_reports.push_back(acc.report());
  for (std::size_t l = 0; l < n_layers; ++l)
    m.layer_magnitudes.push_back(mag_sum[l] / static_cast<double>(mag_windows));
  for (const auto& [id, fr] : hist) {
    AllocationEntry e;
    e.frequency = fr.first;
    e.mean_active_ratio = fr.second / static_cast<double>(fr.first);
    m.histogram.entries[id] = e;
    m.histogram.total_tokens += fr.first;
  }
  m.ppl = std::exp(nll / static_cast<double>(n_targets));
  m.token_count = m.model_report.token_count;
  return m;
}

/// exp(mean token NLL) over a held-out byte stream.
inline double evaluate_ppl(const std::filesystem::path& ckpt_path,
                           const std::filesystem::path& data_path) {
  const LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  const std::vector<int> bytes = ingest(data_path);
  if (bytes.empty()) throw Error("evaluate_ppl: held-out data is empty");
  double nll = 0.0;
  std::size_t count = 0;
  std::size_t w_start = 0;
  for (const auto& inputs : detail::eval_windows(bytes, ckpt.config.model.ctx)) {
    const ForwardTrace<float> trace = model_forward(ckpt.params, inputs);
    nll += detail::window_nll(trace.logits, bytes, w_start, inputs.size());
    count += inputs.size();
    w_start += inputs.size();
  }
  return std::exp(nll / static_cast<double>(count));
}

}  // namespace chunkmoe
