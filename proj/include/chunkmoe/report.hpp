// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "chunkmoe/trainer.hpp"

namespace chunkmoe {

inline nlohmann::json sparsity_report_json(const SparsityReport& r) {
  nlohmann::json j;
  j["tls"] = r.tls;
  nlohmann::json cls = nlohmann::json::object();
  for (const auto& [len, v] : r.cls) cls[std::to_string(len)] = v;
  j["cls"] = cls;
  if (r.reuse_ratio) j["reuse_ratio"] = *r.reuse_ratio;
  else j["reuse_ratio"] = nullptr;
  if (r.union_sparsity) j["union_sparsity"] = *r.union_sparsity;
  else j["union_sparsity"] = nullptr;
  j["token_count"] = r.token_count;
  return j;
}

struct ReportArtifacts {
  std::filesystem::path cls_curve_csv;
  std::filesystem::path histogram_csv;
  std::filesystem::path magnitude_csv;
  std::filesystem::path report_json;
  ModelMeasurement measurement;
};

/// Emits the measurement suite for a checkpoint over a dataset:
/// CLS-vs-L curve, expert-allocation histogram, per-layer activation
/// magnitudes, and the pooled sparsity report.
inline ReportArtifacts report(const std::filesystem::path& ckpt_path,
                              const std::filesystem::path& data_path,
                              const std::filesystem::path& out_dir) {
  const LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  const std::vector<int> bytes = ingest(data_path);
  if (bytes.empty()) throw Error("report: data is empty");
  std::filesystem::create_directories(out_dir);

  ReportArtifacts art;
  art.measurement = measure_model(ckpt.params, bytes);
  const ModelMeasurement& m = art.measurement;

  art.cls_curve_csv = out_dir / "cls_curve.csv";
  {
    std::ofstream f(art.cls_curve_csv, std::ios::trunc);
    f << "L,cls\n";
    for (const auto& [len, v] : m.model_report.cls)
      f << len << ',' << detail::fmt_metric(v) << '\n';
  }

  art.histogram_csv = out_dir / "allocation_histogram.csv";
  {
    std::ofstream f(art.histogram_csv, std::ios::trunc);
    f << "token_id,frequency,mean_active_ratio\n";
    for (const auto& [id, e] : m.histogram.entries)
      f << id << ',' << e.frequency << ',' << detail::fmt_metric(e.mean_active_ratio) << '\n';
  }

  art.magnitude_csv = out_dir / "layer_magnitude.csv";
  {
    std::ofstream f(art.magnitude_csv, std::ios::trunc);
    f << "layer,mean_l2\n";
    for (std::size_t l = 0; l < m.layer_magnitudes.size(); ++l)
      f << l << ',' << detail::fmt_metric(m.layer_magnitudes[l]) << '\n';
  }

  art.report_json = out_dir / "sparsity_report.json";
  {
    nlohmann::json j = sparsity_report_json(m.model_report);
    j["ppl"] = m.ppl;
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& lr : m.layer_reports) layers.push_back(sparsity_report_json(lr));
    j["layers"] = layers;
    std::ofstream f(art.report_json, std::ios::trunc);
    f << j.dump(2) << '\n';
  }
  return art;
}

// ---------------------------------------------------------------------------
// Ablation matrix driver.
// ---------------------------------------------------------------------------

/// Arm spec grammar: kind tokens joined by '+', optionally ':lambda0'.
/// Kinds: null, al, cs, l1, ent, lb.  Examples: "null", "cs", "al+cs:0.3".
inline TrainConfig arm_config(const TrainConfig& base, const std::string& spec,
                              std::string* arm_name = nullptr) {
  TrainConfig cfg = base;
  cfg.objective.al = false;
  cfg.objective.sparsifier = Sparsifier::none;
  cfg.objective.balance = false;

  std::string name = spec;
  double lambda0 = -1.0;
  if (const auto colon = spec.find(':'); colon != std::string::npos) {
    name = spec.substr(0, colon);
    lambda0 = detail::parse_double(spec.substr(colon + 1), "ablate lambda0");
  }
  std::size_t pos = 0;
  std::vector<std::string> kinds;
  while (pos <= name.size()) {
    const auto plus = name.find('+', pos);
    kinds.push_back(name.substr(pos, plus == std::string::npos ? name.size() - pos
                                                               : plus - pos));
    if (plus == std::string::npos) break;
    pos = plus + 1;
  }
  for (const std::string& kind : kinds) {
    if (kind == "null") {
      check_config(kinds.size() == 1, "ablate: 'null' cannot combine with other kinds");
    } else if (kind == "al") {
      cfg.objective.al = true;
    } else if (kind == "lb") {
      cfg.objective.balance = true;
    } else if (kind == "cs" || kind == "l1" || kind == "ent") {
      check_config(cfg.objective.sparsifier == Sparsifier::none,
                   "ablate: at most one sparsifier per arm");
      cfg.objective.sparsifier = detail::parse_sparsifier(kind);
    } else {
      throw ConfigError("ablate: unknown objective kind: " + kind);
    }
  }
  if (lambda0 > 0.0) cfg.objective.lambda0 = lambda0;

  std::string dir = spec;
  for (char& c : dir)
    if (c == '+' || c == ':') c = '_';
  cfg.data.out_dir = (std::filesystem::path(base.data.out_dir) / dir).string();
  if (arm_name) *arm_name = spec;
  return cfg;
}

struct ArmResult {
  std::string name;
  double tls = 0.0;
  double cls8 = 0.0;
  std::optional<double> reuse;
  double ppl = 0.0;
  double final_lambda_cs = 0.0;
  std::filesystem::path ckpt;
};

/// Trains one configuration per matrix entry and measures each final
/// checkpoint on the held-out stream.
inline std::vector<ArmResult> run_ablation(const TrainConfig& base,
                                           const std::vector<std::string>& matrix,
                                           std::ostream* progress = nullptr) {
  check_config(!base.data.heldout.empty(), "ablate: data.heldout is required");
  const std::vector<int> heldout = ingest(base.data.heldout);
  check_config(!heldout.empty(), "ablate: held-out data is empty");

  std::vector<ArmResult> results;
  for (const std::string& spec : matrix) {
    std::string name;
    const TrainConfig cfg = arm_config(base, spec, &name);
    if (progress) (*progress) << "=== arm " << name << " ===\n";
    const TrainResult tr = train(cfg, progress);
    const LoadedCheckpoint ckpt = load_checkpoint(tr.ckpt_path);
    const ModelMeasurement m = measure_model(ckpt.params, heldout);
    ArmResult r;
    r.name = name;
    r.tls = m.model_report.tls;
    if (auto it = m.model_report.cls.find(8); it != m.model_report.cls.end())
      r.cls8 = it->second;
    r.reuse = m.model_report.reuse_ratio;
    r.ppl = m.ppl;
    r.final_lambda_cs = tr.final_lambda_cs;
    r.ckpt = tr.ckpt_path;
    results.push_back(std::move(r));
    if (progress)
      (*progress) << "arm " << name << ": tls " << results.back().tls << " cls8 "
                  << results.back().cls8 << " ppl " << results.back().ppl << '\n';
  }

  // Summary artifacts next to the arm directories.
  std::filesystem::create_directories(base.data.out_dir);
  {
    std::ofstream f(std::filesystem::path(base.data.out_dir) / "ablation_summary.csv",
                    std::ios::trunc);
    f << "arm,tls,cls8,reuse,ppl,final_lambda_cs\n";
    for (const auto& r : results)
      f << r.name << ',' << detail::fmt_metric(r.tls) << ',' << detail::fmt_metric(r.cls8)
        << ','
        << detail::fmt_metric(r.reuse.value_or(std::numeric_limits<double>::quiet_NaN()))
        << ',' << detail::fmt_metric(r.ppl) << ',' << detail::fmt_metric(r.final_lambda_cs)
        << '\n';
  }
  {
    nlohmann::json arms = nlohmann::json::array();
    for (const auto& r : results) {
      nlohmann::json a;
      a["arm"] = r.name;
      a["tls"] = r.tls;
      a["cls8"] = r.cls8;
      if (r.reuse) a["reuse"] = *r.reuse;
      else a["reuse"] = nullptr;
      a["ppl"] = r.ppl;
      a["final_lambda_cs"] = r.final_lambda_cs;
      a["ckpt"] = r.ckpt.string();
      arms.push_back(a);
    }
    std::ofstream f(std::filesystem::path(base.data.out_dir) / "ablation_summary.json",
                    std::ios::trunc);
    f << arms.dump(2) << '\n';
  }
  return results;
}

}  // namespace chunkmoe
