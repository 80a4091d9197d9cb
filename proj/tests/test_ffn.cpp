// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "chunkmoe/ffn.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace chunkmoe;

namespace {

FfnConfig tiny_cfg(RouterKind kind = RouterKind::relu_rmsnorm, std::size_t d_h = 4,
                   std::size_t d_e = 3, std::size_t ne = 6) {
  FfnConfig cfg;
  cfg.d_h = d_h;
  cfg.d_e = d_e;
  cfg.n_experts = ne;
  cfg.router = kind;
  if (cfg.uses_top_k()) cfg.top_k = 2;
  if (kind == RouterKind::topp_softmax) cfg.top_p = 0.6;
  if (cfg.uses_shared()) cfg.n_shared = 1;
  return cfg;
}

oracle::Mat to_mat(const Tensor<double>& t) {
  oracle::Mat m = oracle::make(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t(r, c);
  return m;
}

}  // namespace

TEST_CASE("relu_rmsnorm router matches the scalar oracle") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    FfnConfig cfg = tiny_cfg(RouterKind::relu_rmsnorm, 2, 2, 3);
    FfnParams<double> p = FfnParams<double>::init(cfg, rng);
    Tensor<double> x = testutil::rand_tensor(4, cfg.d_h, rng);
    const RouterActivations<double> acts = router_forward(x, p, cfg);
    const oracle::Mat ref = oracle::router_relu_rmsnorm(
        to_mat(x), to_mat(p.w_router),
        {p.router_gain.flat().begin(), p.router_gain.flat().end()}, cfg.eps);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t e = 0; e < cfg.n_experts; ++e)
        CHECK(acts.a(r, e) == Catch::Approx(ref[r][e]).margin(1e-12));
  }
}

TEST_CASE("router zero input and all-negative preactivations") {
  std::mt19937_64 rng(32);
  FfnConfig cfg = tiny_cfg();
  FfnParams<double> p = FfnParams<double>::init(cfg, rng);
  const RouterActivations<double> z = router_forward(Tensor<double>::zeros(2, cfg.d_h), p, cfg);
  for (const double v : z.a0.flat()) CHECK(v == 0.0);
  for (const double v : z.a1.flat()) CHECK(v == 0.0);
  for (const double v : z.a.flat()) CHECK(v == 0.0);

  // Force negative logits: router weights -1, positive input.
  p.w_router = Tensor<double>::full(cfg.d_h, cfg.n_experts, -1.0);
  const RouterActivations<double> neg =
      router_forward(Tensor<double>::full(2, cfg.d_h, 0.5), p, cfg);
  for (const double v : neg.a.flat()) CHECK(v == 0.0);
}

TEST_CASE("expert closed form and oracle") {
  std::mt19937_64 rng(33);
  FfnConfig unit = tiny_cfg(RouterKind::relu_rmsnorm, 1, 1, 1);
  FfnParams<double> p = FfnParams<double>::init(unit, rng);
  p.w_up[0] = Tensor<double>::full(1, 1, 1.0);
  p.w_down[0] = Tensor<double>::full(1, 1, 1.0);
  const Tensor<double> y = expert_forward(Tensor<double>::full(1, 1, 1.0), p, unit, 0);
  CHECK(y(0, 0) == Catch::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(expert_forward(Tensor<double>::zeros(1, 1), p, unit, 0)(0, 0) == 0.0);

  FfnConfig cfg = tiny_cfg();
  FfnParams<double> q = FfnParams<double>::init(cfg, rng);
  Tensor<double> x = testutil::rand_tensor(3, cfg.d_h, rng);
  const Tensor<double> e0 = expert_forward(x, q, cfg, 2);
  const oracle::Mat ref = oracle::expert_nongated(to_mat(x), to_mat(q.w_up[2]), to_mat(q.w_down[2]));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < cfg.d_h; ++c)
      CHECK(e0(r, c) == Catch::Approx(ref[r][c]).margin(1e-12));
}

TEST_CASE("gated expert matches its oracle") {
  std::mt19937_64 rng(34);
  FfnConfig cfg = tiny_cfg();
  cfg.expert = ExpertKind::gated_swish;
  FfnParams<double> p = FfnParams<double>::init(cfg, rng);
  Tensor<double> x = testutil::rand_tensor(3, cfg.d_h, rng);
  const Tensor<double> y = expert_forward(x, p, cfg, 1);
  const oracle::Mat ref =
      oracle::expert_gated(to_mat(x), to_mat(p.w_gate[1]), to_mat(p.w_up[1]), to_mat(p.w_down[1]));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < cfg.d_h; ++c)
      CHECK(y(r, c) == Catch::Approx(ref[r][c]).margin(1e-12));
}

TEST_CASE("ffn_forward matches full-summation oracle and zero case") {
  std::mt19937_64 rng(35);
  FfnConfig cfg = tiny_cfg();
  FfnParams<double> p = FfnParams<double>::init(cfg, rng);
  const FfnForwardResult<double> zero = ffn_forward(Tensor<double>::zeros(2, cfg.d_h), p, cfg);
  for (const double v : zero.y.flat()) CHECK(v == 0.0);

  Tensor<double> x = testutil::rand_tensor(5, cfg.d_h, rng);
  const FfnForwardResult<double> res = ffn_forward(x, p, cfg);
  std::vector<oracle::Mat> w_up, w_down;
  for (std::size_t i = 0; i < cfg.n_experts; ++i) {
    w_up.push_back(to_mat(p.w_up[i]));
    w_down.push_back(to_mat(p.w_down[i]));
  }
  const oracle::Mat ref = oracle::ffn_dense(to_mat(x), to_mat(res.acts.a), w_up, w_down);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < cfg.d_h; ++c)
      CHECK(res.y(r, c) == Catch::Approx(ref[r][c]).margin(1e-10));
}

TEST_CASE("dense path and skip-zeros path agree bitwise") {
  std::mt19937_64 rng(36);
  for (const RouterKind kind :
       {RouterKind::relu_rmsnorm, RouterKind::topk_softmax, RouterKind::topp_softmax}) {
    FfnConfig cfg = tiny_cfg(kind);
    FfnParams<double> p = FfnParams<double>::init(cfg, rng);
    Tensor<double> x = testutil::rand_tensor(6, cfg.d_h, rng);
    const FfnForwardResult<double> sparse = ffn_forward(x, p, cfg, true);
    const FfnForwardResult<double> dense = ffn_forward(x, p, cfg, false);
    for (std::size_t i = 0; i < sparse.y.size(); ++i)
      CHECK(sparse.y.flat()[i] == dense.y.flat()[i]);
  }
}

TEST_CASE("adaptive expert counts: relu varies, topk constant") {
  std::mt19937_64 rng(37);
  FfnConfig relu_cfg = tiny_cfg(RouterKind::relu_rmsnorm, 8, 4, 12);
  FfnParams<double> p = FfnParams<double>::init(relu_cfg, rng);
  Tensor<double> x = testutil::rand_tensor(32, relu_cfg.d_h, rng);
  const RouterActivations<double> acts = router_forward(x, p, relu_cfg);
  std::set<std::size_t> counts;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::size_t nz = 0;
    for (std::size_t e = 0; e < relu_cfg.n_experts; ++e)
      if (acts.a(r, e) != 0.0) ++nz;
    counts.insert(nz);
  }
  CHECK(counts.size() > 1);  // different tokens activate different numbers

  for (const RouterKind kind : {RouterKind::topk_softmax, RouterKind::shared_topk_softmax,
                                RouterKind::sigmoid_norm_topk}) {
    FfnConfig cfg = tiny_cfg(kind, 8, 4, 12);
    FfnParams<double> q = FfnParams<double>::init(cfg, rng);
    const RouterActivations<double> a = router_forward(x, q, cfg);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      std::size_t nz = 0;
      for (std::size_t e = 0; e < cfg.n_experts; ++e)
        if (a.a(r, e) != 0.0) ++nz;
      CHECK(nz == cfg.top_k + cfg.n_shared);
    }
  }
}

TEST_CASE("rmsnorm support invariance and router linearity") {
  std::mt19937_64 rng(38);
  FfnConfig cfg = tiny_cfg(RouterKind::relu_rmsnorm, 6, 3, 10);
  FfnParams<double> p = FfnParams<double>::init(cfg, rng);
  Tensor<double> x = testutil::rand_tensor(16, cfg.d_h, rng);
  const RouterActivations<double> acts = router_forward(x, p, cfg);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t e = 0; e < cfg.n_experts; ++e)
      CHECK((acts.a(r, e) != 0.0) == (acts.a1(r, e) > 0.0));

  // Scaling the input scales A0 and preserves the ReLU support exactly.
  const double c = 3.5;
  const RouterActivations<double> scaled = router_forward(scale(x, c), p, cfg);
  for (std::size_t i = 0; i < acts.a0.size(); ++i) {
    CHECK(scaled.a0.flat()[i] == Catch::Approx(c * acts.a0.flat()[i]).margin(1e-12));
    CHECK((scaled.a1.flat()[i] > 0.0) == (acts.a1.flat()[i] > 0.0));
  }
}

TEST_CASE("topk keeps softmax values and breaks ties toward lower index") {
  FfnConfig cfg = tiny_cfg(RouterKind::topk_softmax, 2, 2, 4);
  cfg.top_k = 2;
  std::mt19937_64 rng(39);
  FfnParams<double> p = FfnParams<double>::init(cfg, rng);
  p.w_router = Tensor<double>::zeros(2, 4);  // all logits equal -> full tie
  const RouterActivations<double> acts =
      router_forward(Tensor<double>::full(1, 2, 1.0), p, cfg);
  CHECK(acts.a(0, 0) == Catch::Approx(0.25));
  CHECK(acts.a(0, 1) == Catch::Approx(0.25));
  CHECK(acts.a(0, 2) == 0.0);
  CHECK(acts.a(0, 3) == 0.0);
}

TEST_CASE("topp includes the mass-crossing entry") {
  FfnConfig cfg = tiny_cfg(RouterKind::topp_softmax, 2, 2, 3);
  cfg.top_p = 0.6;
  std::mt19937_64 rng(40);
  FfnParams<double> p = FfnParams<double>::init(cfg, rng);
  // Logits ln(5), ln(3), ln(2) -> softmax 0.5, 0.3, 0.2.
  p.w_router = Tensor<double>(2, 3, {std::log(5.0), std::log(3.0), std::log(2.0), 0, 0, 0});
  Tensor<double> x(1, 2, {1.0, 0.0});
  const RouterActivations<double> acts = router_forward(x, p, cfg);
  CHECK(acts.a(0, 0) == Catch::Approx(0.5));
  CHECK(acts.a(0, 1) == Catch::Approx(0.3));  // crosses 0.6, included
  CHECK(acts.a(0, 2) == 0.0);

  cfg.top_p = 0.5;
  const RouterActivations<double> exact = router_forward(x, p, cfg);
  CHECK(exact.a(0, 0) == Catch::Approx(0.5));
  CHECK(exact.a(0, 1) == 0.0);
}

TEST_CASE("shared experts are pinned to activation one") {
  std::mt19937_64 rng(41);
  for (const RouterKind kind :
       {RouterKind::shared_topk_softmax, RouterKind::sigmoid_norm_topk}) {
    FfnConfig cfg = tiny_cfg(kind, 4, 3, 6);
    cfg.n_shared = 2;
    cfg.top_k = 2;
    FfnParams<double> p = FfnParams<double>::init(cfg, rng);
    CHECK(p.w_router.cols() == cfg.routed_experts());
    Tensor<double> x = testutil::rand_tensor(5, cfg.d_h, rng);
    const RouterActivations<double> acts = router_forward(x, p, cfg);
    for (std::size_t r = 0; r < 5; ++r) {
      CHECK(acts.a(r, 0) == 1.0);
      CHECK(acts.a(r, 1) == 1.0);
      if (kind == RouterKind::sigmoid_norm_topk) {
        double sum = 0.0;
        for (std::size_t e = cfg.n_shared; e < cfg.n_experts; ++e) sum += acts.a(r, e);
        CHECK(sum == Catch::Approx(1.0).epsilon(1e-9));  // renormalized selection
      }
    }
  }
}

TEST_CASE("config validation rejects bad router settings") {
  FfnConfig cfg = tiny_cfg(RouterKind::topk_softmax);
  cfg.top_k = 99;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  FfnConfig cfg2 = tiny_cfg(RouterKind::topp_softmax);
  cfg2.top_p = 0.0;
  CHECK_THROWS_AS(cfg2.validate(), ConfigError);
  FfnConfig cfg3 = tiny_cfg(RouterKind::relu_rmsnorm);
  cfg3.n_shared = 1;
  CHECK_THROWS_AS(cfg3.validate(), ConfigError);
}

namespace {

/// Flattened-parameter finite-difference check of the full tape FFN. Returns
/// false when the sampled instance is kink-adjacent (caller resamples).
bool ffn_grad_check(RouterKind kind, std::mt19937_64& rng, double& max_err) {
  FfnConfig cfg = tiny_cfg(kind);
  const std::size_t n = 3;
  testutil::TapeCheck tc;
  tc.shapes = {{n, cfg.d_h}, {cfg.d_h, cfg.routed_experts()}};
  const bool has_gain = kind == RouterKind::relu_rmsnorm;
  if (has_gain) tc.shapes.push_back({1, cfg.n_experts});
  for (std::size_t i = 0; i < cfg.n_experts; ++i) {
    tc.shapes.push_back({cfg.d_h, cfg.d_e});
    tc.shapes.push_back({cfg.d_e, cfg.d_h});
  }
  tc.build = [cfg, has_gain](Tape<double>& t, const std::vector<Tape<double>::Id>& in) {
    FfnParamIds<double> ids;
    std::size_t k = 0;
    const auto x = in[k++];
    ids.w_router = in[k++];
    if (has_gain) {
      ids.router_gain = in[k++];
      ids.has_gain = true;
    }
    for (std::size_t i = 0; i < cfg.n_experts; ++i) {
      ids.w_up.push_back(in[k++]);
      ids.w_down.push_back(in[k++]);
    }
    const FfnTapeResult<double> res = ffn_forward_tape(t, x, ids, cfg);
    return t.sum_all(t.hadamard(res.y, res.y));
  };
  const std::vector<double> point = tc.random_point(rng);

  // Kink margin: distance of router preactivations from zero (and from
  // top-k selection boundaries for the masked kinds).
  const auto tensors = tc.unflatten(point);
  Tensor<double> x = tensors[0];
  FfnParams<double> p = FfnParams<double>::init(cfg, rng);
  std::size_t k = 1;
  p.w_router = tensors[k++];
  if (has_gain) p.router_gain = tensors[k++];
  for (std::size_t i = 0; i < cfg.n_experts; ++i) {
    p.w_up[i] = tensors[k++];
    p.w_down[i] = tensors[k++];
  }
  const RouterActivations<double> acts = router_forward(x, p, cfg);
  double margin = std::numeric_limits<double>::infinity();
  const Tensor<double> a0 = matmul(x, p.w_router);
  for (const double v : a0.flat()) margin = std::min(margin, std::abs(v));
  const auto res = tc.run(point, 1e-6, margin);
  if (res.skipped) return false;
  max_err = res.max_rel_err;
  return true;
}

}  // namespace

TEST_CASE("ffn backward matches finite differences") {
  std::mt19937_64 rng(42);
  for (const RouterKind kind : {RouterKind::relu_rmsnorm, RouterKind::relu_plain}) {
    int done = 0;
    for (int attempt = 0; attempt < 20 && done < 3; ++attempt) {
      double err = 1.0;
      if (!ffn_grad_check(kind, rng, err)) continue;
      CHECK(err < 1e-4);
      ++done;
    }
    CHECK(done == 3);
  }
}

TEST_CASE("zero upstream yields zero gradients") {
  std::mt19937_64 rng(43);
  FfnConfig cfg = tiny_cfg();
  FfnParams<double> p = FfnParams<double>::init(cfg, rng);
  Tape<double> tape;
  FfnParamIds<double> ids = ffn_params_to_tape(tape, p, cfg);
  const auto x = tape.leaf(testutil::rand_tensor(2, cfg.d_h, rng));
  const FfnTapeResult<double> res = ffn_forward_tape(tape, x, ids, cfg);
  tape.backward(tape.scale(tape.sum_all(res.y), 0.0));
  const Tensor<double> g = tape.grad(ids.w_router);
  for (const double v : g.flat()) CHECK(v == 0.0);
}

TEST_CASE("inactive expert receives no weight gradient") {
  std::mt19937_64 rng(44);
  FfnConfig cfg = tiny_cfg(RouterKind::relu_rmsnorm, 3, 2, 4);
  FfnParams<double> p = FfnParams<double>::init(cfg, rng);
  // Expert 0's router column is strongly negative: never activated.
  for (std::size_t d = 0; d < cfg.d_h; ++d) p.w_router(d, 0) = -100.0;
  Tape<double> tape;
  FfnParamIds<double> ids = ffn_params_to_tape(tape, p, cfg);
  Tensor<double> xt = testutil::rand_tensor(3, cfg.d_h, rng, 0.1, 1.0);
  const auto x = tape.leaf(xt);
  const FfnTapeResult<double> res = ffn_forward_tape(tape, x, ids, cfg);
  REQUIRE(tape.value(res.router.a)(0, 0) == 0.0);
  tape.backward(tape.sum_all(res.y));
  const Tensor<double> gu = tape.grad(ids.w_up[0]);
  const Tensor<double> gd = tape.grad(ids.w_down[0]);
  for (const double v : gu.flat()) CHECK(v == 0.0);
  for (const double v : gd.flat()) CHECK(v == 0.0);
}
