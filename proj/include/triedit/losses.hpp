// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. image_loss mixes a pixel MSE with a feature-space L1
// distance computed by a fixed, seeded random conv network (never trained).
#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "triedit/network.hpp"

namespace triedit {

struct LossWeights {
  double lambda1 = 1.0;  // L_2d
  double lambda2 = 1.0;  // L_3d
  double l2_weight = 1.0;
  double perceptual_weight = 2.0;
  std::uint64_t perceptual_seed = 1234;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct LossReport {
  double l_2d = 0;
  double l_3d = 0;
  double l_3d_image = 0;
  double l_3d_triplane = 0;
  double l_3d_depth = 0;
  double total = 0;
};

void to_json(nlohmann::json& j, const LossReport& r);

/// Teacher outputs over the camera set: fitted triplane plus per-camera
/// images [h, w, 3] and depth maps [h, w] (0 where the teacher sees nothing).
struct TeacherTargets {
  Triplane<float> t_gt;
  std::vector<Tensorf> images;
  std::vector<Tensorf> depths;
  std::vector<CameraPose> cameras;

  void validate() const;
};

/// Fixed random feature extractor: 3->8 (stride 1), 8->16 (stride 2), 16->16 (stride 2), SiLU after each.
template <typename Real>
struct PerceptualNet {
  std::vector<ConvLayer<Real>> layers;
  static PerceptualNet make(std::uint64_t seed);
  std::vector<ad::Var<Real>> features(const ad::Var<Real>& img) const;
};

/// Mean over layers of the mean absolute feature difference.
template <typename Real>
ad::Var<Real> perceptual_distance(const ad::Var<Real>& a, const ad::Var<Real>& b, const PerceptualNet<Real>& net);

template <typename Real>
ad::Var<Real> image_loss(const ad::Var<Real>& pred, const ad::Var<Real>& target, const LossWeights& w);

/// image_loss between the pseudo-label and the full-resolution render of `planes` at the input pose.
template <typename Real>
ad::Var<Real> loss_2d(const Tensor<Real>& i_gt, const ad::Var<Real>& planes, const ModelParams<Real>& model,
                      const CameraPose& pose, const RenderSettings& settings, const LossWeights& w);

template <typename Real>
struct MultiViewPrediction {
  ad::Var<Real> planes;               // T_p, [3, R, R, C]
  std::vector<ad::Var<Real>> images;  // per camera, [h, w, 3]
  std::vector<ad::Var<Real>> depths;  // per camera, [h, w]
};

template <typename Real>
struct Loss3d {
  ad::Var<Real> total, image, triplane, depth;
};

template <typename Real>
Loss3d<Real> loss_3d(const MultiViewPrediction<Real>& pred, const TeacherTargets& teacher, const LossWeights& w);

/// Renders T_p at every teacher camera (low resolution) and evaluates loss_3d.
template <typename Real>
Loss3d<Real> loss_3d(const ad::Var<Real>& planes, const ModelParams<Real>& model, const TeacherTargets& teacher,
                     const RenderSettings& settings, const LossWeights& w);

double total_loss(double l2d, double l3d, const LossWeights& w);

// Value-level helpers.
double image_loss(const Tensorf& pred, const Tensorf& target, const LossWeights& w = {});
double perceptual_distance(const Tensorf& a, const Tensorf& b, std::uint64_t seed = LossWeights{}.perceptual_seed);

}  // namespace triedit
