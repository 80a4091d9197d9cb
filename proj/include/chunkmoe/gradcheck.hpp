// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "chunkmoe/error.hpp"

namespace chunkmoe {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  bool skipped = false;
  std::string diagnostic;
};

/// Central-difference check of an analytic gradient.
///
/// `f` is a scalar function of the flattened parameter vector; `analytic` is
/// the gradient under test at `point`. `kink_margin` is the caller-measured
/// distance to the nearest non-differentiable point (ReLU zero crossing,
/// clamp edge, top-k tie); when it is within 10*step the check is reported
/// as skipped rather than run, since finite differences straddling a kink
/// are meaningless.
///
/// Relative error uses max(|a|, |n|, scale_floor) as denominator so that
/// near-zero gradient entries are compared absolutely.
inline GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> analytic,
                                  std::span<const double> point, double step,
                                  double kink_margin = std::numeric_limits<double>::infinity(),
                                  double scale_floor = 1e-3) {
  check_contract(analytic.size() == point.size(), "grad_check: gradient/point size mismatch");
  check_contract(step > 0.0, "grad_check: step must be > 0");
  GradCheckResult res;
  if (kink_margin <= 10.0 * step) {
    res.skipped = true;
    res.diagnostic = "kink proximity: margin " + std::to_string(kink_margin) +
                     " <= 10*step " + std::to_string(10.0 * step);
    return res;
  }
  std::vector<double> x(point.begin(), point.end());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double fp = f(x);
    x[i] = keep - step;
    const double fm = f(x);
    x[i] = keep;
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), scale_floor});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (err > res.max_rel_err) {
      res.max_rel_err = err;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace chunkmoe
