// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>
#include <random>

#include "support/fixtures.hpp"
#include "triedit/eval.hpp"

using namespace triedit;

namespace {

Tensorf random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Tensorf t({h, w, 3});
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

const EmbeddingModel& idm() {
  static const EmbeddingModel m = EmbeddingModel::make(EmbeddingModel::Kind::Identity);
  return m;
}

const Dataset& toy_dataset() {
  static const Dataset d = [] {
    DatasetConfig c;
    c.num_scenes = 1;
    c.styles = {style_by_id("teal")};
    c.cameras_per_scene = 2;
    c.camera_set_size = 2;
    c.march_samples = 32;
    c.model = ModelConfig::toy();
    c.fit.grid = 8;
    c.fit.iterations = 10;
    c.fit.batch = 128;
    return build_dataset(c);
  }();
  return d;
}

}  // namespace

TEST_CASE("embeddings are unit-norm and deterministic") {
  for (std::uint64_t seed : {1ull, 2ull}) {
    const auto e = idm().embed(random_image(16, 16, seed));
    double n = 0;
    for (double v : e) n += v * v;
    CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-6);
    CHECK(e == EmbeddingModel::make(EmbeddingModel::Kind::Identity).embed(random_image(16, 16, seed)));
  }
  const auto black = idm().embed(Tensorf({16, 16, 3}));
  for (double v : black) CHECK(std::isfinite(v));
  const auto a = idm().embed(random_image(16, 16, 3));
  const auto b = EmbeddingModel::make(EmbeddingModel::Kind::PromptSpace).embed(random_image(16, 16, 3));
  CHECK(a != b);
}

TEST_CASE("id_t examples and laws") {
  const Tensorf x = random_image(16, 16, 4), y = random_image(16, 16, 5);
  CHECK(triedit::id_t(x, x, idm()) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(triedit::id_t(x, y, idm()) == triedit::id_t(y, x, idm()));
  CHECK_THROWS_AS(triedit::id_t(x, random_image(8, 8, 1), idm()), ValidationError);
  // Embeddings built by hand bypass the extractor.
  const std::vector<double> e1{1, 0, 0}, e2{0, 1, 0}, e3{-1, 0, 0};
  CHECK(cosine(e1, e2) == 0.0);
  CHECK(cosine(e1, e3) == -1.0);
  const auto a = idm().embed(x), b = idm().embed(y);
  std::vector<double> a3 = a;
  for (double& v : a3) v *= 3.7;
  CHECK(cosine(a3, b) == doctest::Approx(cosine(a, b)).epsilon(1e-14));
  CHECK(cosine(a, b) >= -1.0);
  CHECK(cosine(a, b) <= 1.0);
}

TEST_CASE("clip_r examples") {
  const EmbeddingModel pm = EmbeddingModel::make(EmbeddingModel::Kind::PromptSpace);
  const Tensorf ex = random_image(16, 16, 6);
  CHECK(clip_r(ex, Prompt::from_image(ex), pm) == doctest::Approx(1.0).epsilon(1e-12));
  const Prompt text = Prompt::from_text("make the face teal");
  CHECK_THROWS_AS(clip_r(ex, text, pm), ValidationError);
  CHECK(clip_r(ex, text, pm, {{"make the face teal", ex}}) == doctest::Approx(1.0).epsilon(1e-12));
  const Tensorf other = random_image(16, 16, 0);
  CHECK(clip_r(other, Prompt::from_image(ex), pm) == clip_r(other, Prompt::from_image(ex), pm));
}

TEST_CASE("consistency_3d examples and permutation invariance") {
  const ModelConfig mc = ModelConfig::toy();
  FitOptions f;
  f.channels = mc.triplane_channels;
  f.resolution = mc.triplane_resolution;
  f.grid = 12;
  f.iterations = 60;
  const auto dec = canonical_decoder(mc);
  const Triplane<float> t = fit_triplane_to_field(testing::sphere_field(0.6), dec, f);
  const auto ups = Upsampler<float>::init(mc.color_dim, mc.upsampler_hidden, 2, 3);
  const auto ring = sample_camera_ring(4, 2.7, 0.0, Eigen::Vector3d::Zero(), 0.0, 30.0, 16);
  const RenderSettings rs{16};
  const double c1 = consistency_3d(t, dec, ups, ring, idm(), 16, rs);
  const double c2 = consistency_3d(t, dec, ups, ring, idm(), 16, rs);
  CHECK(std::abs(c1 - c2) <= 1e-12);
  const std::vector<CameraPose> perm{ring[2], ring[0], ring[3], ring[1]};
  CHECK(std::abs(consistency_3d(t, dec, ups, perm, idm(), 16, rs) - c1) <= 1e-12);
  CHECK(consistency_3d(t, dec, ups, {ring[1], ring[1]}, idm(), 16, rs) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(consistency_3d(t, dec, ups, {ring[0]}, idm(), 16, rs), ValidationError);
}

TEST_CASE("timing harness order statistics") {
  const auto p = ModelParams<float>::init(ModelConfig::toy());
  const EditSample& s = toy_dataset().samples[0];
  const TimingStats st = time_inference(p, s, 100, 5, {8});
  CHECK(st.runs_ms.size() == 100);
  CHECK(st.p50 <= st.p95);
  CHECK(st.mean >= st.min);
  CHECK(st.mean <= st.max);
  CHECK(st.min > 0);
  CHECK_THROWS_AS(time_inference(p, s, 0), ValidationError);
}

TEST_CASE("psnr and masked depth L1") {
  Tensorf a({2, 2, 3}), b({2, 2, 3}, 0.1f);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK(std::isinf(psnr(a, a)));
  Tensorf d({2, 2}, std::vector<float>{1, 2, 3, 4}), r({2, 2}, std::vector<float>{0, 2.5f, 0, 3});
  CHECK(masked_depth_l1(d, r) == doctest::Approx(0.75));
  CHECK(masked_depth_l1(d, Tensorf({2, 2})) == 0.0);
}

TEST_CASE("evaluate produces a bounded report and honours the CLIP_r exclusion") {
  const auto p = ModelParams<float>::init(ModelConfig::toy());
  EvalOptions o;
  o.timing_runs = 3;
  o.timing_warmup = 1;
  o.samples_per_ray = 8;
  const EvalReport r = evaluate(p, toy_dataset(), o);
  CHECK(r.n_samples == 2);
  CHECK(r.id_t >= -1);
  CHECK(r.id_t <= 1);
  REQUIRE(r.clip_r.has_value());
  CHECK(std::abs(*r.clip_r) <= 1);
  CHECK(std::abs(r.consistency_3d) <= 1);
  CHECK(r.time_ms_mean > 0);
  CHECK(r.time_ms_p50 <= r.time_ms_p95);
  o.clip_r_excluded = true;
  const nlohmann::json j = evaluate(p, toy_dataset(), o);
  CHECK(j["clip_r"].is_null());
  CHECK(j.contains("note"));
}
