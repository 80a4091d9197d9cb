// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "chunkmoe/model.hpp"
#include "chunkmoe/objectives.hpp"

namespace chunkmoe {

enum class Sparsifier { none, cs, l1, ent };

inline const char* to_string(Sparsifier s) {
  switch (s) {
    case Sparsifier::none: return "none";
    case Sparsifier::cs: return "cs";
    case Sparsifier::l1: return "l1";
    case Sparsifier::ent: return "ent";
  }
  return "?";
}

struct ObjectiveConfig {
  bool al = false;
  double lambda_al = 2e-3;
  double alpha = kDefaultAlpha;
  bool al_detach_target = false;
  Sparsifier sparsifier = Sparsifier::none;
  double lambda0 = 5e-2;
  std::size_t n_st = 1000;
  std::size_t n_adj = 100;
  double gamma_min = 1.025;
  std::size_t chunk_len = 8;
  bool balance = false;
  double lambda_balance = 1e-2;
};

struct OptimConfig {
  double lr_peak = 3e-3;
  std::size_t warmup_steps = 100;
  std::size_t decay_steps = 500;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
};

struct DataConfig {
  std::string corpus;
  std::string heldout;
  std::size_t batch = 4;
  std::size_t steps = 1000;
  std::size_t log_interval = 50;
  std::size_t ckpt_interval = 0;  // 0: final checkpoint only
  std::string out_dir = "run";
};

struct TrainConfig {
  ModelConfig model;
  ObjectiveConfig objective;
  OptimConfig optim;
  DataConfig data;
  std::uint64_t seed = 1;

  void validate() const {
    model.validate();
    check_config(data.batch >= 1 && data.steps >= 1, "config: batch and steps must be >= 1");
    check_config(data.log_interval >= 1, "config: log_interval must be >= 1");
    check_config(objective.chunk_len >= 1, "config: chunk_len must be >= 1");
    check_config(objective.n_adj >= 1, "config: n_adj must be >= 1");
    check_config(optim.lr_peak > 0.0, "config: lr_peak must be > 0");
    check_config(optim.warmup_steps + optim.decay_steps <= data.steps,
                 "config: warmup + decay must not exceed steps");
  }
};

// ---------------------------------------------------------------------------
// Key-value (de)serialization.  `key = value` lines, '#' comments, unknown
// keys are errors.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError("config: bad boolean for " + key + ": " + v);
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": " + v);
  }
}

inline std::uint64_t parse_uint(const std::string& v, const std::string& key) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("config: bad integer for " + key + ": " + v);
  return out;
}

inline RouterKind parse_router(const std::string& v) {
  if (v == "relu_rmsnorm") return RouterKind::relu_rmsnorm;
  if (v == "relu_plain") return RouterKind::relu_plain;
  if (v == "topk_softmax") return RouterKind::topk_softmax;
  if (v == "shared_topk_softmax") return RouterKind::shared_topk_softmax;
  if (v == "sigmoid_norm_topk") return RouterKind::sigmoid_norm_topk;
  if (v == "topp_softmax") return RouterKind::topp_softmax;
  throw ConfigError("config: unknown router kind: " + v);
}

inline ExpertKind parse_expert(const std::string& v) {
  if (v == "nongated_swish") return ExpertKind::nongated_swish;
  if (v == "gated_swish") return ExpertKind::gated_swish;
  throw ConfigError("config: unknown expert kind: " + v);
}

inline Sparsifier parse_sparsifier(const std::string& v) {
  if (v == "none") return Sparsifier::none;
  if (v == "cs") return Sparsifier::cs;
  if (v == "l1") return Sparsifier::l1;
  if (v == "ent") return Sparsifier::ent;
  throw ConfigError("config: unknown sparsifier: " + v);
}

}  // namespace detail

inline void apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  auto& m = c.model;
  auto& o = c.objective;
  auto& p = c.optim;
  auto& d = c.data;
  if (key == "model.d_h") m.ffn.d_h = parse_uint(value, key);
  else if (key == "model.d_e") m.ffn.d_e = parse_uint(value, key);
  else if (key == "model.n_experts") m.ffn.n_experts = parse_uint(value, key);
  else if (key == "model.n_shared") m.ffn.n_shared = parse_uint(value, key);
  else if (key == "model.router") m.ffn.router = parse_router(value);
  else if (key == "model.expert") m.ffn.expert = parse_expert(value);
  else if (key == "model.top_k") m.ffn.top_k = parse_uint(value, key);
  else if (key == "model.top_p") m.ffn.top_p = parse_double(value, key);
  else if (key == "model.eps") m.ffn.eps = parse_double(value, key);
  else if (key == "model.n_layers") m.n_layers = parse_uint(value, key);
  else if (key == "model.vocab") m.vocab = parse_uint(value, key);
  else if (key == "model.ctx") m.ctx = parse_uint(value, key);
  else if (key == "model.n_heads") m.n_heads = parse_uint(value, key);
  else if (key == "objective.al") o.al = parse_bool(value, key);
  else if (key == "objective.lambda_al") o.lambda_al = parse_double(value, key);
  else if (key == "objective.alpha") o.alpha = parse_double(value, key);
  else if (key == "objective.al_detach_target") o.al_detach_target = parse_bool(value, key);
  else if (key == "objective.sparsifier") o.sparsifier = parse_sparsifier(value);
  else if (key == "objective.lambda0") o.lambda0 = parse_double(value, key);
  else if (key == "objective.n_st") o.n_st = parse_uint(value, key);
  else if (key == "objective.n_adj") o.n_adj = parse_uint(value, key);
  else if (key == "objective.gamma_min") o.gamma_min = parse_double(value, key);
  else if (key == "objective.chunk_len") o.chunk_len = parse_uint(value, key);
  else if (key == "objective.balance") o.balance = parse_bool(value, key);
  else if (key == "objective.lambda_balance") o.lambda_balance = parse_double(value, key);
  else if (key == "optim.lr_peak") p.lr_peak = parse_double(value, key);
  else if (key == "optim.warmup_steps") p.warmup_steps = parse_uint(value, key);
  else if (key == "optim.decay_steps") p.decay_steps = parse_uint(value, key);
  else if (key == "optim.beta1") p.beta1 = parse_double(value, key);
  else if (key == "optim.beta2") p.beta2 = parse_double(value, key);
  else if (key == "optim.weight_decay") p.weight_decay = parse_double(value, key);
  else if (key == "optim.clip_norm") p.clip_norm = parse_double(value, key);
  else if (key == "data.corpus") d.corpus = value;
  else if (key == "data.heldout") d.heldout = value;
  else if (key == "data.batch") d.batch = parse_uint(value, key);
  else if (key == "data.steps") d.steps = parse_uint(value, key);
  else if (key == "data.log_interval") d.log_interval = parse_uint(value, key);
  else if (key == "data.ckpt_interval") d.ckpt_interval = parse_uint(value, key);
  else if (key == "data.out_dir") d.out_dir = value;
  else if (key == "seed") c.seed = parse_uint(value, key);
  else throw ConfigError("config: unknown key: " + key);
}

inline TrainConfig parse_config_text(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
    apply_config_entry(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

/// Canonical serialization (the checkpoint's config echo).
inline std::string serialize_config(const TrainConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "model.d_h = " << c.model.ffn.d_h << '\n'
      << "model.d_e = " << c.model.ffn.d_e << '\n'
      << "model.n_experts = " << c.model.ffn.n_experts << '\n'
      << "model.n_shared = " << c.model.ffn.n_shared << '\n'
      << "model.router = " << to_string(c.model.ffn.router) << '\n'
      << "model.expert = " << to_string(c.model.ffn.expert) << '\n'
      << "model.top_k = " << c.model.ffn.top_k << '\n'
      << "model.top_p = " << c.model.ffn.top_p << '\n'
      << "model.eps = " << c.model.ffn.eps << '\n'
      << "model.n_layers = " << c.model.n_layers << '\n'
      << "model.vocab = " << c.model.vocab << '\n'
      << "model.ctx = " << c.model.ctx << '\n'
      << "model.n_heads = " << c.model.n_heads << '\n'
      << "objective.al = " << (c.objective.al ? "true" : "false") << '\n'
      << "objective.lambda_al = " << c.objective.lambda_al << '\n'
      << "objective.alpha = " << c.objective.alpha << '\n'
      << "objective.al_detach_target = " << (c.objective.al_detach_target ? "true" : "false")
      << '\n'
      << "objective.sparsifier = " << to_string(c.objective.sparsifier) << '\n'
      << "objective.lambda0 = " << c.objective.lambda0 << '\n'
      << "objective.n_st = " << c.objective.n_st << '\n'
      << "objective.n_adj = " << c.objective.n_adj << '\n'
      << "objective.gamma_min = " << c.objective.gamma_min << '\n'
      << "objective.chunk_len = " << c.objective.chunk_len << '\n'
      << "objective.balance = " << (c.objective.balance ? "true" : "false") << '\n'
      << "objective.lambda_balance = " << c.objective.lambda_balance << '\n'
      << "optim.lr_peak = " << c.optim.lr_peak << '\n'
      << "optim.warmup_steps = " << c.optim.warmup_steps << '\n'
      << "optim.decay_steps = " << c.optim.decay_steps << '\n'
      << "optim.beta1 = " << c.optim.beta1 << '\n'
      << "optim.beta2 = " << c.optim.beta2 << '\n'
      << "optim.weight_decay = " << c.optim.weight_decay << '\n'
      << "optim.clip_norm = " << c.optim.clip_norm << '\n'
      << "data.corpus = " << c.data.corpus << '\n'
      << "data.heldout = " << c.data.heldout << '\n'
      << "data.batch = " << c.data.batch << '\n'
      << "data.steps = " << c.data.steps << '\n'
      << "data.log_interval = " << c.data.log_interval << '\n'
      << "data.ckpt_interval = " << c.data.ckpt_interval << '\n'
      << "data.out_dir = " << c.data.out_dir << '\n'
      << "seed = " << c.seed << '\n';
  return out.str();
}

}  // namespace chunkmoe
