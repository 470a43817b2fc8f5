// SPDX-License-Identifier: Apache-2.0
#include "triedit/losses.hpp"

#include <cmath>
#include <nlohmann/json.hpp>
#include <random>

namespace triedit {

void LossWeights::validate() const {
  require(lambda1 >= 0 && lambda2 >= 0 && l2_weight >= 0 && perceptual_weight >= 0, "loss weights must be non-negative");
  require(std::isfinite(lambda1) && std::isfinite(lambda2) && std::isfinite(l2_weight) && std::isfinite(perceptual_weight),
          "loss weights must be finite");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda1", w.lambda1},
                     {"lambda2", w.lambda2},
                     {"l2_weight", w.l2_weight},
                     {"perceptual_weight", w.perceptual_weight},
                     {"perceptual_seed", w.perceptual_seed}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  try {
    const LossWeights d;
    w.lambda1 = j.value("lambda1", d.lambda1);
    w.lambda2 = j.value("lambda2", d.lambda2);
    w.l2_weight = j.value("l2_weight", d.l2_weight);
    w.perceptual_weight = j.value("perceptual_weight", d.perceptual_weight);
    w.perceptual_seed = j.value("perceptual_seed", d.perceptual_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid loss weights: ") + e.what());
  }
  w.validate();
}

void to_json(nlohmann::json& j, const LossReport& r) {
  j = nlohmann::json{{"l_2d", r.l_2d},
                     {"l_3d", r.l_3d},
                     {"l_3d_image", r.l_3d_image},
                     {"l_3d_triplane", r.l_3d_triplane},
                     {"l_3d_depth", r.l_3d_depth},
                     {"total", r.total}};
}

void TeacherTargets::validate() const {
  require(!cameras.empty(), "teacher targets need at least one camera");
  require(images.size() == cameras.size() && depths.size() == cameras.size(),
          "teacher targets: images, depths and cameras must have equal length");
  t_gt.validate();
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    require(images[i].rank() == 3 && images[i].dim(2) == 3, "teacher image must be [h, w, 3]");
    require(depths[i].rank() == 2 && depths[i].dim(0) == images[i].dim(0) && depths[i].dim(1) == images[i].dim(1),
            "teacher depth must match its image size");
  }
}

template <typename Real>
PerceptualNet<Real> PerceptualNet<Real>::make(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PerceptualNet net;
  const int dims[4] = {3, 8, 16, 16};
  for (int l = 0; l < 3; ++l) {
    const int cin = dims[l], cout = dims[l + 1];
    const double bound = std::sqrt(6.0 / (9.0 * cin));
    std::uniform_real_distribution<double> d(-bound, bound);
    Tensor<Real> w({3, 3, cin, cout});
    for (auto& v : w.storage()) v = static_cast<Real>(d(rng));
    net.layers.push_back({ad::Var<Real>::constant(std::move(w)), ad::Var<Real>::constant(Tensor<Real>({cout}))});
  }
  return net;
}

template <typename Real>
std::vector<ad::Var<Real>> PerceptualNet<Real>::features(const ad::Var<Real>& img) const {
  std::vector<ad::Var<Real>> out;
  ad::Var<Real> x = img;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    x = ad::silu(ad::conv2d(x, layers[l].w, layers[l].b, l == 0 ? 1 : 2, 1));
    out.push_back(x);
  }
  return out;
}

template <typename Real>
ad::Var<Real> perceptual_distance(const ad::Var<Real>& a, const ad::Var<Real>& b, const PerceptualNet<Real>& net) {
  const auto fa = net.features(a), fb = net.features(b);
  std::vector<ad::Var<Real>> terms;
  for (std::size_t l = 0; l < fa.size(); ++l) terms.push_back(ad::mean_abs_error(fa[l], fb[l]));
  return ad::weighted_sum(terms, std::vector<Real>(terms.size(), Real(1) / static_cast<Real>(terms.size())));
}

template <typename Real>
ad::Var<Real> image_loss(const ad::Var<Real>& pred, const ad::Var<Real>& target, const LossWeights& w) {
  require(pred.shape() == target.shape(), "image_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                              shape_str(target.shape()));
  require(pred.shape().size() == 3 && pred.shape()[2] == 3, "image_loss: images must be [h, w, 3]");
  std::vector<ad::Var<Real>> terms{ad::mean_squared_error(pred, target)};
  std::vector<Real> weights{static_cast<Real>(w.l2_weight)};
  if (w.perceptual_weight != 0) {
    terms.push_back(perceptual_distance(pred, target, PerceptualNet<Real>::make(w.perceptual_seed)));
    weights.push_back(static_cast<Real>(w.perceptual_weight));
  }
  return ad::weighted_sum(terms, weights);
}

template <typename Real>
ad::Var<Real> loss_2d(const Tensor<Real>& i_gt, const ad::Var<Real>& planes, const ModelParams<Real>& model,
                      const CameraPose& pose, const RenderSettings& settings, const LossWeights& w) {
  const int size = model.config.image_size;
  require(i_gt.shape() == Shape{size, size, 3}, "loss_2d: pseudo-label must be " + shape_str({size, size, 3}));
  auto r = render_full(planes, static_cast<Real>(model.config.triplane_extent), model.decoder, model.upsampler, pose, size,
                       size, settings);
  return image_loss(r.rgb_final, ad::Var<Real>::constant(i_gt), w);
}

template <typename Real>
Loss3d<Real> loss_3d(const MultiViewPrediction<Real>& pred, const TeacherTargets& teacher, const LossWeights& w) {
  teacher.validate();
  const std::size_t n = teacher.cameras.size();
  require(pred.images.size() == n && pred.depths.size() == n, "loss_3d: camera-set length mismatch between prediction and teacher");
  require(pred.planes.shape() == teacher.t_gt.planes.shape(), "loss_3d: triplane shape mismatch");
  std::vector<ad::Var<Real>> img_terms, depth_terms;
  for (std::size_t i = 0; i < n; ++i) {
    img_terms.push_back(image_loss(pred.images[i], ad::Var<Real>::constant(teacher.images[i].template cast<Real>()), w));
    Tensor<Real> mask(teacher.depths[i].shape());
    for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = teacher.depths[i][k] > 0 ? Real(1) : Real(0);
    require(pred.depths[i].shape() == teacher.depths[i].shape(), "loss_3d: depth map size mismatch");
    depth_terms.push_back(
        ad::masked_mean_abs_error(pred.depths[i], ad::Var<Real>::constant(teacher.depths[i].template cast<Real>()), mask));
  }
  const std::vector<Real> avg(n, Real(1) / static_cast<Real>(n));
  Loss3d<Real> out;
  out.image = ad::weighted_sum(img_terms, avg);
  out.depth = ad::weighted_sum(depth_terms, avg);
  out.triplane = ad::mean_abs_error(pred.planes, ad::Var<Real>::constant(teacher.t_gt.planes.template cast<Real>()));
  out.total = ad::weighted_sum<Real>({out.image, out.triplane, out.depth}, {Real(1), Real(1), Real(1)});
  return out;
}

template <typename Real>
Loss3d<Real> loss_3d(const ad::Var<Real>& planes, const ModelParams<Real>& model, const TeacherTargets& teacher,
                     const RenderSettings& settings, const LossWeights& w) {
  teacher.validate();
  MultiViewPrediction<Real> pred;
  pred.planes = planes;
  const Real extent = static_cast<Real>(model.config.triplane_extent);
  for (std::size_t i = 0; i < teacher.cameras.size(); ++i) {
    const int h = teacher.images[i].dim(0), wd = teacher.images[i].dim(1);
    RenderSettings s = settings;
    s.seed = settings.seed + 7919 * (i + 1);
    auto r = volume_render(planes, extent, model.decoder, teacher.cameras[i], h, wd, s);
    pred.images.push_back(r.rgb_low);
    pred.depths.push_back(r.depth);
  }
  return loss_3d(pred, teacher, w);
}

double total_loss(double l2d, double l3d, const LossWeights& w) {
  w.validate();
  return w.lambda1 * l2d + w.lambda2 * l3d;
}

double image_loss(const Tensorf& pred, const Tensorf& target, const LossWeights& w) {
  ad::NoGradGuard ng;
  return image_loss(ad::Var<double>::constant(pred.cast<double>()), ad::Var<double>::constant(target.cast<double>()), w).item();
}

double perceptual_distance(const Tensorf& a, const Tensorf& b, std::uint64_t seed) {
  require(a.shape() == b.shape(), "perceptual_distance: shape mismatch");
  ad::NoGradGuard ng;
  return perceptual_distance(ad::Var<double>::constant(a.cast<double>()), ad::Var<double>::constant(b.cast<double>()),
                             PerceptualNet<double>::make(seed))
      .item();
}

#define TRIEDIT_INSTANTIATE_LOSSES(R)                                                                                   \
  template struct PerceptualNet<R>;                                                                                     \
  template ad::Var<R> perceptual_distance<R>(const ad::Var<R>&, const ad::Var<R>&, const PerceptualNet<R>&);            \
  template ad::Var<R> image_loss<R>(const ad::Var<R>&, const ad::Var<R>&, const LossWeights&);                          \
  template ad::Var<R> loss_2d<R>(const Tensor<R>&, const ad::Var<R>&, const ModelParams<R>&, const CameraPose&,         \
                                 const RenderSettings&, const LossWeights&);                                            \
  template Loss3d<R> loss_3d<R>(const MultiViewPrediction<R>&, const TeacherTargets&, const LossWeights&);              \
  template Loss3d<R> loss_3d<R>(const ad::Var<R>&, const ModelParams<R>&, const TeacherTargets&, const RenderSettings&, \
                                const LossWeights&);

TRIEDIT_INSTANTIATE_LOSSES(float)
TRIEDIT_INSTANTIATE_LOSSES(double)

}  // namespace triedit
