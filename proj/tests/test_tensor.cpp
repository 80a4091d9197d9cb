// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "chunkmoe/tensor.hpp"

using namespace chunkmoe;

TEST_CASE("matmul identity and zero cases") {
  std::mt19937_64 rng(7);
  Tensor<double> m = randn<double>(3, 3, rng);
  const Tensor<double> left = matmul(Tensor<double>::identity(3), m);
  const Tensor<double> right = matmul(m, Tensor<double>::identity(3));
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(left.flat()[i] == m.flat()[i]);
    CHECK(right.flat()[i] == m.flat()[i]);
  }
  const Tensor<double> z = matmul(Tensor<double>::zeros(2, 3), m);
  for (const double v : z.flat()) CHECK(v == 0.0);
}

TEST_CASE("matmul scalar arithmetic") {
  Tensor<double> a(2, 2, {1, 2, 3, 4});
  Tensor<double> b(2, 1, {1, 1});
  const Tensor<double> c = matmul(a, b);
  CHECK(c(0, 0) == 3.0);
  CHECK(c(1, 0) == 7.0);
}

TEST_CASE("matmul rejects dimension mismatch") {
  Tensor<double> a(2, 3);
  Tensor<double> b(2, 2);
  CHECK_THROWS_AS(matmul(a, b), ContractError);
}

TEST_CASE("matmul transposed variants agree with explicit transpose") {
  std::mt19937_64 rng(11);
  Tensor<double> a = randn<double>(4, 3, rng);
  Tensor<double> b = randn<double>(5, 3, rng);
  const Tensor<double> nt = matmul_nt(a, b);
  const Tensor<double> ref = matmul(a, transpose(b));
  for (std::size_t i = 0; i < nt.size(); ++i)
    CHECK(nt.flat()[i] == Catch::Approx(ref.flat()[i]).margin(1e-14));
  Tensor<double> c = randn<double>(3, 4, rng);
  Tensor<double> d = randn<double>(3, 5, rng);
  const Tensor<double> tn = matmul_tn(c, d);
  const Tensor<double> ref2 = matmul(transpose(c), d);
  for (std::size_t i = 0; i < tn.size(); ++i)
    CHECK(tn.flat()[i] == Catch::Approx(ref2.flat()[i]).margin(1e-14));
}

TEST_CASE("elementwise basics") {
  Tensor<double> t(1, 2, {-1.0, 2.0});
  const Tensor<double> r = relu(t);
  CHECK(r(0, 0) == 0.0);
  CHECK(r(0, 1) == 2.0);

  CHECK(swish(Tensor<double>::zeros(1, 1))(0, 0) == 0.0);
  CHECK(swish(Tensor<double>::full(1, 1, 1.0))(0, 0) ==
        Catch::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(sigmoid(Tensor<double>::zeros(1, 1))(0, 0) == 0.5);
}

TEST_CASE("elementwise flags non-finite outputs") {
  CHECK_THROWS_AS(chunkmoe::exp(Tensor<double>::full(1, 1, 1e4)), NumericError);
}

TEST_CASE("log clamps its input floor") {
  Tensor<double> t(1, 2, {0.0, -5.0});
  const Tensor<double> l = chunkmoe::log(t);
  CHECK(l(0, 0) == Catch::Approx(std::log(1e-7)));
  CHECK(l(0, 1) == Catch::Approx(std::log(1e-7)));
}

TEST_CASE("rmsnorm zero vector maps to zero") {
  std::vector<double> v(4, 0.0), gain(4, 2.0);
  const auto out = rmsnorm<double>(v, gain, 1e-6);
  for (const double x : out) CHECK(x == 0.0);
}

TEST_CASE("rmsnorm unit vector with unit gain") {
  std::vector<double> v(4, 1.0), gain(4, 1.0);
  const auto out = rmsnorm<double>(v, gain, 1e-12);
  for (const double x : out) CHECK(x == Catch::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("rmsnorm worked example") {
  std::vector<double> v{3.0, 0.0, 0.0, 4.0}, gain(4, 1.0);
  const auto out = rmsnorm<double>(v, gain, 1e-6);
  const double denom = std::sqrt(25.0 / 4.0 + 1e-6);
  CHECK(out[0] == Catch::Approx(3.0 / denom).epsilon(1e-12));
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 0.0);
  CHECK(out[3] == Catch::Approx(4.0 / denom).epsilon(1e-12));
}

TEST_CASE("rmsnorm preserves support for any gain") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> x = randn<double>(1, 8, rng);
    for (std::size_t c = 0; c < 8; c += 2) x(0, c) = 0.0;
    Tensor<double> gain = randn<double>(1, 8, rng);
    for (auto& g : gain.raw())
      if (g == 0.0) g = 0.1;  // nonzero gains for the nonzero->nonzero half
    const auto out = rmsnorm<double>(x.flat(), gain.flat(), 1e-6);
    for (std::size_t c = 0; c < 8; ++c) {
      if (x(0, c) == 0.0) CHECK(out[c] == 0.0);
      else CHECK(out[c] != 0.0);
    }
  }
}

TEST_CASE("rmsnorm validates arguments") {
  std::vector<double> v(4, 1.0), gain(3, 1.0);
  CHECK_THROWS_AS(rmsnorm<double>(v, gain, 1e-6), ContractError);
  std::vector<double> gain4(4, 1.0);
  CHECK_THROWS_AS(rmsnorm<double>(v, gain4, 0.0), ContractError);
}
