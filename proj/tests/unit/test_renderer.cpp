// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace triedit;
using ad::Var;

namespace {

// Pose on the +z axis whose [near, far] segment has the requested length.
CameraPose segment_pose(double near, double far, double focal = 4, int size = 4) {
  CameraPose p;
  p.cam_to_world(2, 3) = 2.0;
  p.focal = focal;
  p.cx = p.cy = 0.5 * size;
  p.near = near;
  p.far = far;
  return p;
}

double softplus_inv(double y) { return std::log(std::expm1(y)); }
double logit(double y) { return std::log(y / (1 - y)); }

float homogeneous_pixel(int samples) {
  const double s = 2.0, c = 0.8;
  auto dec = testing::constant_decoder<float>(2, float(softplus_inv(s)), float(logit(c)), 0.f, 0.f);
  auto t = Triplane<float>::zeros(2, 4);
  auto out = volume_render(t, dec, segment_pose(1.5, 2.5), 4, 4, {samples});
  return out.rgb_low[0];
}

}  // namespace

TEST_CASE("empty medium renders black with zero acc and depth") {
  auto dec = testing::constant_decoder<float>(2, -1e6f, 1.f, 1.f, 1.f);
  auto out = volume_render(Triplane<float>::zeros(2, 4), dec, orbit_pose(0, 0, {2.7, 30, 8, 1}), 8, 8);
  for (float v : out.rgb_low.storage()) CHECK(v == 0.f);
  for (float v : out.acc.storage()) CHECK(v == 0.f);
  for (float v : out.depth.storage()) CHECK(v == 0.f);
}

TEST_CASE("homogeneous medium matches the analytic transmittance integral") {
  const double expected = 0.8 * (1 - std::exp(-2.0));
  const float v128 = homogeneous_pixel(128);
  CHECK(std::abs(v128 - expected) / expected < 0.01);
  const float v64 = homogeneous_pixel(64);
  CHECK(std::abs(v128 - v64) / v64 < 0.005);
  CHECK_THROWS_AS(homogeneous_pixel(1), ValidationError);
}

TEST_CASE("opaque slab gives depth at the slab front") {
  // XZ plane feature is +1 on rows z in [0, 0.3] with a zero node at z = 0.3 and -1 elsewhere,
  // so density is essentially 1e4 * f inside and 0 outside.
  const int r = 41;  // node spacing 0.05
  auto t = Triplane<float>::zeros(1, r);
  for (int row = 0; row < r; ++row) {
    const double z = -1 + 0.05 * row;
    const float f = (z > 1e-9 && z < 0.3 - 1e-9) ? 1.f : (std::abs(z - 0.3) < 1e-9 ? 0.f : -1.f);
    for (int col = 0; col < r; ++col) t.at(1, 0, row, col) = f;
  }
  DecoderMLP<float> dec{Var<float>::constant(Tensor<float>({1, 1}, std::vector<float>{1e4f})),
                        Var<float>::constant(Tensor<float>({1})),
                        Var<float>::constant(Tensor<float>({1, 4}, std::vector<float>{1, 0, 0, 0})),
                        Var<float>::constant(Tensor<float>({4}, std::vector<float>{-30, 0, 0, 0}))};
  const CameraPose pose = orbit_pose(0, 0, {2.7, 30, 9, 1});
  const int samples = 128;
  auto out = volume_render(t, dec, pose, 9, 9, {samples});
  const double spacing = (pose.far - pose.near) / samples;
  const double t0 = 2.7 - 0.3;
  CHECK(out.acc[4 * 9 + 4] > 0.999f);
  CHECK(std::abs(out.depth[4 * 9 + 4] - t0) <= spacing);
}

TEST_CASE("weights are nonnegative, sum to at most one, transmittance never increases") {
  std::mt19937_64 rng(1);
  std::exponential_distribution<double> e(0.3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> sigma(64);
    for (auto& s : sigma) s = e(rng) * (trial % 3 == 0 ? 100 : 1);
    std::vector<double> trans;
    auto w = composite_weights(sigma, 0.05, &trans);
    double sum = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      CHECK(w[i] >= 0);
      sum += w[i];
      if (i > 0) CHECK(trans[i] <= trans[i - 1]);
    }
    CHECK(sum <= 1 + 1e-6);
  }
}

TEST_CASE("render invariants on a random field") {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n(0, 1);
  auto t = Triplane<float>::zeros(8, 8);
  for (auto& v : t.planes.storage()) v = n(rng);
  auto dec = DecoderMLP<float>::init(8, 16, 4, 3);
  const CameraPose pose = orbit_pose(15, 5, {2.7, 30, 16, 1});
  auto out = volume_render(t, dec, pose, 16, 16, {24, SamplingMode::Stratified, 5});
  for (std::size_t i = 0; i < out.acc.size(); ++i) {
    CHECK(out.acc[i] >= 0.f);
    CHECK(out.acc[i] <= 1.f + 1e-6f);
    if (out.acc[i] > 1e-3f) {
      CHECK(out.depth[i] >= pose.near - 1e-4);
      CHECK(out.depth[i] <= pose.far + 1e-4);
    }
  }
  for (float v : out.rgb_low.storage()) CHECK((v >= 0.f && v <= 1.f));
}

TEST_CASE("full pipeline gradient: rendered image loss w.r.t. plane entries (64-bit, 8x8)") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 0.5);
  auto planes = Var<double>::leaf(Triplane<double>::zeros(4, 6).planes, true);
  for (auto& v : planes.mutable_value().storage()) v = n(rng);
  auto dec = DecoderMLP<double>::init(4, 8, 4, 4);
  auto ups = Upsampler<double>::init(4, 4, 2, 5);
  for (auto& v : ups.w2.mutable_value().storage()) v = n(rng);
  Tensor<double> target({8, 8, 3});
  for (auto& v : target.storage()) v = 0.5 + 0.3 * n(rng);
  const CameraPose pose = orbit_pose(10, 5, {2.7, 30, 8, 1});
  for (SamplingMode mode : {SamplingMode::Midpoint, SamplingMode::Stratified}) {
    auto res = testing::grad_check({planes}, [&] {
      auto r = render_full(planes, 1.0, dec, ups, pose, 8, 8, {16, mode, 9});
      return ad::add(ad::mean_squared_error(r.rgb_final, Var<double>::constant(target)),
                     ad::scale(ad::mean_abs_error(r.depth, Var<double>::constant(Tensor<double>({4, 4}, 2.5))), 0.1));
    }, 60);
    MESSAGE("render grad rel err = " << res.rel_error);
    CHECK(res.rel_error < 1e-3);
    CHECK(res.analytic_norm > 0);
  }
}

TEST_CASE("composite backward w.r.t. density and colour with depth and acc terms") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  auto planes = Var<double>::leaf(Triplane<double>::zeros(3, 5).planes, true);
  for (auto& v : planes.mutable_value().storage()) v = n(rng);
  auto dec = DecoderMLP<double>::init(3, 6, 5, 6, true);
  const CameraPose pose = orbit_pose(-20, 0, {2.7, 30, 4, 1});
  auto res = testing::grad_check({planes, dec.w1, dec.b1, dec.w2, dec.b2}, [&] {
    auto r = volume_render(planes, 1.0, dec, pose, 4, 4, {12});
    auto feat_term = ad::mean_squared_error(r.features, Var<double>::constant(Tensor<double>({4, 4, 5}, 0.3)));
    auto acc_term = ad::mean_squared_error(r.acc, Var<double>::constant(Tensor<double>({4, 4}, 0.7)));
    auto depth_term = ad::mean_abs_error(r.depth, Var<double>::constant(Tensor<double>({4, 4}, 2.0)));
    return ad::weighted_sum<double>({feat_term, acc_term, depth_term}, {1.0, 0.5, 0.2});
  }, 30);
  CHECK(res.rel_error < 1e-5);
}

TEST_CASE("identity upsampler equals nearest-neighbour upsampling") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.05f, 0.95f);
  Tensorf rgb({3, 4, 3}), feat({3, 4, 5});
  for (auto& v : rgb.storage()) v = u(rng);
  for (auto& v : feat.storage()) v = u(rng);
  auto ups = Upsampler<float>::init(5, 8, 2, 1);
  auto out = upsample(rgb, feat, ups, 6, 8);
  REQUIRE(out.shape() == Shape{6, 8, 3});
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 8; ++j)
      for (int c = 0; c < 3; ++c) CHECK(out[(i * 8 + j) * 3 + c] == doctest::Approx(rgb[((i / 2) * 4 + j / 2) * 3 + c]).epsilon(1e-5));
  Tensorf constant({3, 4, 3}, 0.4f);
  auto flat = upsample(constant, feat, ups, 6, 8);
  for (float v : flat.storage()) CHECK(v == doctest::Approx(0.4f).epsilon(1e-5));
  CHECK_THROWS_AS(upsample(rgb, feat, ups, 7, 8), ValidationError);
  CHECK_THROWS_AS(upsample(rgb, feat, ups, 9, 12), ValidationError);
}

TEST_CASE("random upsampler matches a by-hand convolution at 4x4") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.1, 0.9);
  std::normal_distribution<double> n(0, 0.5);
  const int F = 3, Hd = 2;
  Tensor<double> rgb({2, 2, 3}), feat({2, 2, F});
  for (auto& v : rgb.storage()) v = u(rng);
  for (auto& v : feat.storage()) v = n(rng);
  auto ups = Upsampler<double>::init(F, Hd, 2, 7);
  for (auto* p : {&ups.w1, &ups.b1, &ups.w2, &ups.b2})
    for (auto& v : p->mutable_value().storage()) v = n(rng);
  auto out = upsample(Var<double>::constant(rgb), Var<double>::constant(feat), ups).value();

  auto conv = [](const std::vector<double>& x, int h, int w, int cin, const Tensor<double>& k, const Tensor<double>& b,
                 int cout) {
    std::vector<double> y(h * w * cout);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int o = 0; o < cout; ++o) {
          double s = b[o];
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int yi = i + di, xj = j + dj;
              if (yi < 0 || yi >= h || xj < 0 || xj >= w) continue;
              for (int c = 0; c < cin; ++c) s += x[(yi * w + xj) * cin + c] * k[(((di + 1) * 3 + dj + 1) * cin + c) * cout + o];
            }
          y[(i * w + j) * cout + o] = s;
        }
    return y;
  };
  auto hidden = conv(feat.storage(), 2, 2, F, ups.w1.value(), ups.b1.value(), Hd);
  for (auto& v : hidden) v = v / (1 + std::exp(-v));
  std::vector<double> up(4 * 4 * Hd);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int c = 0; c < Hd; ++c) up[(i * 4 + j) * Hd + c] = hidden[((i / 2) * 2 + j / 2) * Hd + c];
  auto res = conv(up, 4, 4, Hd, ups.w2.value(), ups.b2.value(), 3);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int c = 0; c < 3; ++c) {
        const double base = rgb[((i / 2) * 2 + j / 2) * 3 + c];
        const double ref = 1 / (1 + std::exp(-(std::log(base / (1 - base)) + res[(i * 4 + j) * 3 + c])));
        CHECK(out[(i * 4 + j) * 3 + c] == doctest::Approx(ref).epsilon(1e-12));
      }
}

TEST_CASE("render_full determinism and the empty triplane") {
  std::mt19937_64 rng(7);
  std::normal_distribution<float> n(0, 1);
  auto t = Triplane<float>::zeros(8, 8);
  for (auto& v : t.planes.storage()) v = n(rng);
  auto dec = DecoderMLP<float>::init(8, 16, 4, 1);
  auto ups = Upsampler<float>::init(4, 8, 2, 2);
  for (auto& v : ups.w2.mutable_value().storage()) v = 0.1f * n(rng);
  const CameraPose pose = orbit_pose(5, 5, {2.7, 30, 16, 1});
  const RenderSettings s{16, SamplingMode::Stratified, 42};
  auto a = render_full(t, dec, ups, pose, 16, 16, s), b = render_full(t, dec, ups, pose, 16, 16, s);
  CHECK(a.rgb_final == b.rgb_final);
  CHECK(a.depth == b.depth);
  auto c = render_full(t, dec, ups, pose, 16, 16, {16, SamplingMode::Stratified, 43});
  CHECK_FALSE(a.depth == c.depth);

  auto fresh_ups = Upsampler<float>::init(3, 8, 2, 2);
  auto empty_dec = testing::constant_decoder<float>(8, -1e6f, 0.f, 0.f, 0.f);
  auto e = render_full(Triplane<float>::zeros(8, 8), empty_dec, fresh_ups, pose, 16, 16);
  auto black = upsample(Tensorf({8, 8, 3}), Tensorf({8, 8, 3}), fresh_ups, 16, 16);
  for (std::size_t i = 0; i < e.rgb_final.size(); ++i) CHECK(std::abs(e.rgb_final[i] - black[i]) <= 1e-6f);
}

TEST_CASE("fitted sphere: antipodal silhouettes have equal area") {
  auto dec = DecoderMLP<float>::init(16, 32, 3, 0);
  FitOptions opt;
  opt.iterations = 300;
  auto t = fit_triplane_to_field(testing::sphere_field(0.55), dec, opt);
  auto ring = sample_camera_ring(2, 2.7, 0, Eigen::Vector3d::Zero(), 30.0);
  double area[2];
  for (int k = 0; k < 2; ++k) {
    auto out = volume_render(t, dec, ring[k], 64, 64, {64});
    area[k] = 0;
    for (float a : out.acc.storage()) area[k] += a > 0.5f;
  }
  MESSAGE("silhouette areas " << area[0] << " " << area[1]);
  CHECK(std::abs(area[0] - area[1]) / std::max(area[0], area[1]) < 0.05);
}

TEST_CASE("depth map round trip") {
  Tensorf d({3, 5});
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.25f * float(i) - 1.f;
  const std::string bytes = encode_depth(d);
  CHECK(bytes.rfind("DEPTH v1 3 5\n", 0) == 0);
  CHECK(decode_depth(bytes) == d);
  CHECK_THROWS_AS(decode_depth("DEPTH v1 3 5\nabc"), IoError);
  CHECK_THROWS_AS(decode_depth("DEPTH v9 3 5\n"), IoError);
}
