// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient checking for double-precision graphs.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "triedit/autodiff.hpp"

namespace triedit::testing {

struct GradCheckResult {
  double rel_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0;
  int entries = 0;
};

/// Checks d loss / d params on up to `per_param` random entries of every param.
/// `loss` rebuilds the graph from the current parameter values each call.
inline GradCheckResult grad_check(std::vector<ad::Var<double>> params,
                                  const std::function<ad::Var<double>()>& loss, int per_param = 12,
                                  double h = 1e-5, std::uint64_t seed = 7) {
  for (auto& p : params) p.zero_grad();
  {
    auto l = loss();
    ad::backward(l);
  }
  std::mt19937_64 rng(seed);
  GradCheckResult r;
  double diff2 = 0, a2 = 0, n2 = 0;
  for (auto& p : params) {
    const std::size_t n = p.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(n, per_param));
    const Tensor<double> grad = p.has_grad() ? p.grad() : Tensor<double>(p.shape());
    for (std::size_t i : idx) {
      double& x = p.mutable_value()[i];
      const double saved = x;
      double lp, lm;
      {
        ad::NoGradGuard ng;
        x = saved + h;
        lp = loss().item();
        x = saved - h;
        lm = loss().item();
      }
      x = saved;
      const double numeric = (lp - lm) / (2 * h);
      diff2 += (grad[i] - numeric) * (grad[i] - numeric);
      a2 += grad[i] * grad[i];
      n2 += numeric * numeric;
      ++r.entries;
    }
  }
  r.analytic_norm = std::sqrt(a2);
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
  r.rel_error = std::sqrt(diff2) / denom;
  return r;
}

}  // namespace triedit::testing
