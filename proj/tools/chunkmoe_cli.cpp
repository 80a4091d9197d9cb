// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: training, evaluation, sparsity reports, kernel
// benchmarks, speculative decoding, and the ablation matrix driver.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "chunkmoe/chunk_kernel.hpp"
#include "chunkmoe/report.hpp"
#include "chunkmoe/spec_decode.hpp"
#include "chunkmoe/trainer.hpp"

namespace {

std::vector<double> parse_densities(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  if (out.empty()) throw chunkmoe::ConfigError("bench-kernel: empty density list");
  return out;
}

std::vector<std::string> parse_matrix(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw chunkmoe::ConfigError("ablate: empty matrix");
  return out;
}

std::string printable(const std::vector<int>& ids) {
  std::string s;
  for (const int id : ids) {
    if (id >= 0x20 && id < 0x7f) s.push_back(static_cast<char>(id));
    else if (id == '\n' || id == '\t') s.push_back(static_cast<char>(id));
    else s.push_back('?');
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chunk-level sparse MoE FFN laboratory"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, data_path, out_dir, prompt, policy_str = "ngram";
  std::string densities_str = "0.05,0.1,0.25,0.5,0.75,1.0", matrix_str, corpus_override;
  std::size_t n_drafts = 8, max_tokens = 64, bench_n = 32, bench_reps = 9;
  std::uint64_t draft_seed = 1234;

  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("--config", config_path, "key-value config file")->required();

  auto* eval_cmd = app.add_subcommand("eval", "perplexity of a checkpoint on a byte stream");
  eval_cmd->add_option("--ckpt", ckpt_path)->required();
  eval_cmd->add_option("--data", data_path)->required();

  auto* report_cmd = app.add_subcommand("report", "sparsity/allocation/magnitude artifacts");
  report_cmd->add_option("--ckpt", ckpt_path)->required();
  report_cmd->add_option("--data", data_path)->required();
  report_cmd->add_option("--out", out_dir, "output directory (default: report/)");

  auto* bench_cmd = app.add_subcommand("bench-kernel", "sparse vs dense kernel wall-clock");
  bench_cmd->add_option("--config", config_path, "config supplying model dims")->required();
  bench_cmd->add_option("--densities", densities_str, "comma-separated union densities");
  bench_cmd->add_option("--n", bench_n, "chunk size (tokens)");
  bench_cmd->add_option("--reps", bench_reps, "timing repetitions");
  bench_cmd->add_option("--out", out_dir, "CSV output path (default: stdout)");

  auto* sd_cmd = app.add_subcommand("spec-decode", "draft/verify decoding with counted costs");
  sd_cmd->add_option("--ckpt", ckpt_path)->required();
  sd_cmd->add_option("--prompt", prompt)->required();
  sd_cmd->add_option("--policy", policy_str, "self_greedy | ngram | random");
  sd_cmd->add_option("--n", n_drafts, "draft tokens per step");
  sd_cmd->add_option("--max-tokens", max_tokens);
  sd_cmd->add_option("--corpus", corpus_override, "corpus for the ngram table");
  sd_cmd->add_option("--seed", draft_seed, "seed for the random policy");

  auto* ablate_cmd = app.add_subcommand("ablate", "train and compare objective arms");
  ablate_cmd->add_option("--config", config_path, "base config file")->required();
  ablate_cmd
      ->add_option("--matrix", matrix_str,
                   "comma-separated arms, e.g. null,cs,l1,al+cs (arm:lambda0 overrides)")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const chunkmoe::TrainConfig cfg = chunkmoe::load_config(config_path);
      const chunkmoe::TrainResult res = chunkmoe::train(cfg, &std::cout);
      std::cout << "checkpoint: " << res.ckpt_path.string() << '\n'
                << "metrics: " << res.csv_path.string() << '\n';
    } else if (*eval_cmd) {
      std::cout << chunkmoe::evaluate_ppl(ckpt_path, data_path) << '\n';
    } else if (*report_cmd) {
      const auto art =
          chunkmoe::report(ckpt_path, data_path, out_dir.empty() ? "report" : out_dir);
      std::cout << "wrote " << art.cls_curve_csv.string() << '\n'
                << "wrote " << art.histogram_csv.string() << '\n'
                << "wrote " << art.magnitude_csv.string() << '\n'
                << "wrote " << art.report_json.string() << '\n';
    } else if (*bench_cmd) {
      const chunkmoe::TrainConfig cfg = chunkmoe::load_config(config_path);
      const auto rows = chunkmoe::bench_chunk_ffn(cfg.model.ffn, parse_densities(densities_str),
                                                  bench_n, bench_reps);
      std::ostringstream csv;
      csv << "density,n,d_h,d_e,N_e,sparse_ns,dense_ns,bytes_ratio\n";
      for (const auto& r : rows)
        csv << r.density << ',' << r.n << ',' << r.d_h << ',' << r.d_e << ',' << r.n_experts
            << ',' << r.sparse_ns << ',' << r.dense_ns << ',' << r.bytes_ratio << '\n';
      if (out_dir.empty()) {
        std::cout << csv.str();
      } else {
        std::ofstream f(out_dir, std::ios::trunc);
        f << csv.str();
        std::cout << "wrote " << out_dir << '\n';
      }
    } else if (*sd_cmd) {
      const chunkmoe::LoadedCheckpoint ckpt = chunkmoe::load_checkpoint(ckpt_path);
      const chunkmoe::DraftPolicy policy = chunkmoe::parse_policy(policy_str);
      chunkmoe::NgramTable table;
      if (policy == chunkmoe::DraftPolicy::ngram) {
        const std::string corpus_path =
            corpus_override.empty() ? ckpt.config.data.corpus : corpus_override;
        if (corpus_path.empty())
          throw chunkmoe::ConfigError("spec-decode: ngram policy needs --corpus");
        const std::vector<int> corpus = chunkmoe::ingest(corpus_path);
        table = chunkmoe::NgramTable::build(corpus);
      }
      const std::vector<int> prompt_ids = chunkmoe::ingest_bytes(prompt);
      const chunkmoe::DecodeResult res = chunkmoe::decode_loop(
          ckpt.params, policy, prompt_ids, max_tokens, n_drafts, &table, draft_seed);
      nlohmann::json j;
      j["policy"] = policy_str;
      j["n"] = n_drafts;
      j["steps"] = res.stats.steps;
      j["tokens_generated"] = res.stats.tokens_generated;
      j["mean_accepted_length"] = res.stats.mean_accepted_length();
      j["median_accepted_length"] = res.stats.median_accepted_length();
      j["counted_ffn_bytes"] = res.stats.counted_ffn_bytes;
      j["counted_ffn_bytes_dense_equivalent"] = res.stats.counted_ffn_bytes_dense_equivalent;
      j["tokens_per_counted_gb"] = res.stats.tokens_per_counted_gb();
      j["text"] = printable(res.generated);
      std::cout << j.dump(2) << '\n';
    } else if (*ablate_cmd) {
      const chunkmoe::TrainConfig base = chunkmoe::load_config(config_path);
      chunkmoe::run_ablation(base, parse_matrix(matrix_str), &std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
