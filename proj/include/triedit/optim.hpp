// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "triedit/tensor.hpp"

namespace triedit {

struct AdamHyper {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Real>
struct AdamMoments {
  Tensor<Real> m;
  Tensor<Real> v;
};

/// One bias-corrected Adam update. `step` is 1-based. `grad_scale` multiplies
/// the raw gradient first (used for global-norm clipping).
template <typename Real>
void adam_update(Tensor<Real>& param, const Tensor<Real>& grad, AdamMoments<Real>& mom, long step, const AdamHyper& h,
                 Real grad_scale = Real(1)) {
  if (mom.m.size() != param.size()) {
    mom.m = Tensor<Real>(param.shape());
    mom.v = Tensor<Real>(param.shape());
  }
  const Real b1 = static_cast<Real>(h.beta1), b2 = static_cast<Real>(h.beta2);
  const Real c1 = Real(1) - static_cast<Real>(std::pow(h.beta1, static_cast<double>(step)));
  const Real c2 = Real(1) - static_cast<Real>(std::pow(h.beta2, static_cast<double>(step)));
  const Real lr = static_cast<Real>(h.lr), eps = static_cast<Real>(h.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const Real g = grad[i] * grad_scale;
    mom.m[i] = b1 * mom.m[i] + (Real(1) - b1) * g;
    mom.v[i] = b2 * mom.v[i] + (Real(1) - b2) * g * g;
    const Real mhat = mom.m[i] / c1;
    const Real vhat = mom.v[i] / c2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace triedit
