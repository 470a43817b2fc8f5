// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion. The empirical stages
// (overfit, ablation, adaptation) share one dataset and one pretrained model.
// Exit status is non-zero when any criterion fails.
#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <unistd.h>

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "triedit/eval.hpp"
#include "triedit/hashing.hpp"
#include "triedit/image_io.hpp"
#include "triedit/service.hpp"
#include "triedit/trainer.hpp"

using namespace triedit;
using nlohmann::json;
using ad::Var;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

struct Outcome {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Outcome> g_outcomes;
json g_record = json::object();

void report(const std::string& name, bool pass, const std::string& detail) {
  g_outcomes.push_back({name, pass, detail});
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

template <typename Real>
void randomize(ModelParams<Real>& p, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, scale);
  for (auto& r : p.parameters())
    if (r.group != ParamGroup::DecoderMLP)
      for (auto& v : r.var->mutable_value().storage()) v += static_cast<Real>(n(rng));
}

template <typename Real>
Tensor<Real> random_image(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor<Real> t({size, size, 3});
  for (auto& v : t.storage()) v = static_cast<Real>(u(rng));
  return t;
}

// ---------------------------------------------------------------------------
// Criteria without training.

void renderer_oracle() {
  const auto t0 = Clock::now();
  const double sigma = 2.0, c = 0.8;
  auto dec = testing::constant_decoder<float>(2, float(std::log(std::expm1(sigma))), float(std::log(c / (1 - c))), 0.f,
                                              0.f);
  CameraPose pose;
  pose.cam_to_world(2, 3) = 2.0;
  pose.focal = 4;
  pose.cx = pose.cy = 2;
  pose.near = 1.5;
  pose.far = 2.5;  // path length 1
  const auto out = volume_render(Triplane<float>::zeros(2, 4), dec, pose, 4, 4, {128});
  const double expected = c * (1 - std::exp(-sigma));
  const double rel = std::abs(out.rgb_low[0] - expected) / expected;
  const double secs = seconds_since(t0);
  g_record["renderer_oracle"] = {{"rel_err", rel}, {"seconds", secs}};
  report("renderer_oracle", rel < 0.01 && secs < 5,
         "pixel " + fmt(out.rgb_low[0], 7) + " vs c(1-e^-2) " + fmt(expected, 7) + ", rel err " + fmt(rel) + " (< 0.01), " +
             fmt(secs, 3) + " s (< 5 s)");
}

void gradient_suite() {
  const auto t0 = Clock::now();
  const ModelConfig mc = ModelConfig::toy();  // 16x16 image, R = 8, C = 4

  // (a) sample_triplane
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 1);
  Tensor<double> tp({3, mc.triplane_resolution, mc.triplane_resolution, mc.triplane_channels});
  for (auto& v : tp.storage()) v = n(rng);
  auto planes = Var<double>::leaf(tp, true);
  std::uniform_real_distribution<double> u(-1.1, 1.1);
  std::vector<double> pts(3 * 40);
  for (auto& v : pts) v = u(rng);
  Tensor<double> w({40, mc.triplane_channels});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(0.7 * double(i));
  const auto ga = testing::grad_check({planes}, [&] {
    return ad::mean_squared_error(sample_triplane(planes, 1.0, pts), Var<double>::constant(w));
  }, 200);

  // (b) volume_render -> image_loss
  auto model = ModelParams<double>::init(mc);
  randomize(model, 21);
  Tensor<double> tp2 = tp;
  for (auto& v : tp2.storage()) v *= 0.5;
  auto planes2 = Var<double>::leaf(tp2, true);
  const CameraPose pose = orbit_pose(10, 5, {2.7, 30, mc.render_size(), 1});
  const auto target = Var<double>::constant(random_image<double>(mc.render_size(), 22));
  const LossWeights lw;
  const auto gb = testing::grad_check({planes2}, [&] {
    auto r = volume_render(planes2, 1.0, model.decoder, pose, mc.render_size(), mc.render_size(), {12});
    return image_loss(r.rgb_low, target, lw);
  }, 60);

  // (c) edit -> total loss, w.r.t. every trainable network parameter
  DatasetConfig dc;
  dc.num_scenes = 1;
  dc.styles = {style_by_id("sepia")};
  dc.cameras_per_scene = 1;
  dc.camera_set_size = 2;
  dc.march_samples = 48;
  dc.model = mc;
  dc.fit.grid = 10;
  dc.fit.iterations = 30;
  dc.fit.batch = 256;
  dc.prompt_mode = PromptMode::Text;
  const Dataset d = build_dataset(dc);
  const EditSample& s = d.samples.at(0);
  const TeacherTargets& teacher = d.teacher(s);
  auto p = ModelParams<double>::init(mc);
  randomize(p, 23, 0.2);
  std::vector<Var<double>> vars;
  for (auto& r : p.parameters())
    if (r.group != ParamGroup::DecoderMLP) {
      r.var->set_requires_grad(true);
      vars.push_back(*r.var);
    }
  const auto img = Var<double>::constant(s.input.cast<double>());
  const Tensor<double> label = s.pseudo_label.cast<double>();
  const RenderSettings rs{8, SamplingMode::Midpoint, 0};
  const auto gc = testing::grad_check(vars, [&] {
    auto planes_p = edit(img, s.prompt, p);
    auto l2 = loss_2d(label, planes_p, p, s.pose, rs, lw);
    auto l3 = loss_3d(planes_p, p, teacher, rs, lw);
    return ad::weighted_sum<double>({l2, l3.total}, {lw.lambda1, lw.lambda2});
  }, 3);

  const double secs = seconds_since(t0);
  const double worst = std::max({ga.rel_error, gb.rel_error, gc.rel_error});
  g_record["gradient_suite"] = {{"sample_triplane", ga.rel_error}, {"volume_render_image_loss", gb.rel_error},
                                {"edit_total_loss", gc.rel_error}, {"edit_entries", gc.entries}, {"seconds", secs}};
  report("gradient_suite",
         worst < 1e-3 && secs < 120 && ga.analytic_norm > 0 && gb.analytic_norm > 0 && gc.analytic_norm > 0,
         "rel err sample_triplane " + fmt(ga.rel_error, 3) + ", volume_render->image_loss " + fmt(gb.rel_error, 3) +
             ", edit->total_loss " + fmt(gc.rel_error, 3) + " over " + std::to_string(gc.entries) +
             " entries (all < 1e-3, float64), " + fmt(secs, 3) + " s (< 120 s)");
}

void zero_init_identity() {
  ModelConfig mc;
  auto p = ModelParams<float>::init(mc);
  const bool zero_o = std::all_of(p.xattn_o.value().storage().begin(), p.xattn_o.value().storage().end(),
                                  [](float v) { return v == 0.f; });
  randomize(p, 31, 0.1);
  p.xattn_o.mutable_value().fill(0.f);  // everything else random, output projection zero
  int equal = 0;
  for (int k = 0; k < 10; ++k) {
    const Tensorf img = random_image<float>(mc.image_size, 100 + k);
    const Prompt prompt = k % 2 == 0 ? Prompt::from_text("make the face style" + std::to_string(k), mc.vocab_size)
                                     : Prompt::from_image(random_image<float>(mc.image_size, 200 + k));
    equal += edit(img, prompt, p).planes == reconstruct(img, p).planes;
  }
  report("zero_init_identity", zero_o && equal == 10,
         std::to_string(equal) + "/10 random (I, P) pairs bitwise equal; fresh init output projection is zero: " +
             (zero_o ? "yes" : "no"));
}

DatasetConfig toy_dataset_config() {
  DatasetConfig c;
  c.num_scenes = 2;
  c.styles = {style_by_id("sepia"), style_by_id("alien")};
  c.cameras_per_scene = 2;
  c.camera_set_size = 3;
  c.march_samples = 48;
  c.model = ModelConfig::toy();
  c.fit.grid = 10;
  c.fit.iterations = 30;
  c.fit.batch = 256;
  return c;
}

TrainConfig toy_train_config() {
  TrainConfig c;
  c.model = ModelConfig::toy();
  c.batch_size = 2;
  c.lr = 1e-3;
  c.samples_per_ray = 8;
  return c;
}

std::vector<Tensorf> snapshot(const ModelParams<float>& p) {
  std::vector<Tensorf> out;
  for (const auto& r : p.parameters()) out.push_back(r.var->value());
  return out;
}

void freezing_contracts(const Dataset& d) {
  auto base = ModelParams<float>::init(ModelConfig::toy());
  randomize(base, 41, 0.1);
  const auto pool = make_pool(d, TrainMode::Distill);
  std::string detail;
  bool ok = true;
  for (TrainMode mode : {TrainMode::Distill, TrainMode::Adapt}) {
    Trainer<float> tr(base.clone(), toy_train_config(), mode);
    const auto before = snapshot(tr.params());
    run_training(tr, pool, 20);
    const auto refs = tr.params().parameters();
    int frozen_changed = 0, trainable_changed = 0, trainable = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const bool changed = !(refs[i].var->value() == before[i]);
      if (tr.policy().trainable(refs[i])) {
        ++trainable;
        trainable_changed += changed;
      } else {
        frozen_changed += changed;
      }
    }
    ok = ok && frozen_changed == 0 && trainable_changed > 0;
    detail += mode_name(mode) + ": " + std::to_string(frozen_changed) + " frozen tensors changed, " +
              std::to_string(trainable_changed) + "/" + std::to_string(trainable) + " trainable changed; ";
  }
  report("freezing_contracts", ok, detail + "20 steps each, bitwise comparison");
}

void loss_bookkeeping(const Dataset& d) {
  TrainConfig c = toy_train_config();
  c.loss_weights.lambda1 = 1.0;
  c.loss_weights.lambda2 = 1.0;
  auto base = ModelParams<float>::init(ModelConfig::toy());
  randomize(base, 51, 0.1);
  Trainer<float> tr(std::move(base), c, TrainMode::Distill);
  std::stringstream log;
  run_training(tr, make_pool(d, TrainMode::Distill), 20, &log);
  int lines = 0;
  double worst = 0;
  for (std::string line; std::getline(log, line);) {
    const json j = json::parse(line);
    worst = std::max(worst, std::abs(j.at("total").get<double>() -
                                     (1.0 * j.at("l_2d").get<double>() + 1.0 * j.at("l_3d").get<double>())));
    ++lines;
  }
  report("loss_bookkeeping", lines == 20 && worst <= 1e-12,
         std::to_string(lines) + " logged records, max |total - (l_2d + l_3d)| = " + fmt(worst, 3) + " (<= 1e-12)");
}

void edit_consistency_oracle(const Dataset& d) {
  double worst = 0;
  int renders = 0;
  for (const auto& s : d.samples) {
    const auto& style = *std::find_if(d.config.styles.begin(), d.config.styles.end(),
                                      [&](const EditStyle& e) { return e.style_id == s.style_id; });
    const SyntheticScene& scene = d.scenes.at(s.scene_index);
    const SyntheticScene edited = scene.edited(style);
    std::vector<std::pair<CameraPose, int>> views{{s.pose, d.config.model.image_size}};
    for (const auto& cam : d.teacher(s).cameras) views.emplace_back(cam, d.config.model.render_size());
    for (const auto& [cam, size] : views) {
      const auto a = render_scene(edited, cam, size, size, d.config.march_samples).rgb;
      const auto b = apply_edit(render_scene(scene, cam, size, size, d.config.march_samples).rgb, style);
      for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, double(std::abs(a[i] - b[i])));
      ++renders;
    }
  }
  g_record["edit_consistency_max_abs"] = worst;
  report("edit_consistency_oracle", worst <= 1e-5,
         std::to_string(d.samples.size()) + " samples, " + std::to_string(renders) +
             " input-view and teacher-camera renders, max |render(edit(scene)) - apply_edit(render(scene))| = " +
             fmt(worst, 3) + " (<= 1e-5)");
}

void metric_laws(const Dataset& d) {
  const auto m = EmbeddingModel::make(EmbeddingModel::Kind::Identity);
  const Tensorf x = random_image<float>(64, 61), y = random_image<float>(64, 62);
  const double self = triedit::id_t(x, x, m);
  const auto ex = m.embed(x), ey = m.embed(y);
  std::vector<double> scaled = ey;
  for (auto& v : scaled) v *= 37.5;
  const double scale_gap = std::abs(cosine(ex, ey) - cosine(ex, scaled));

  auto p = ModelParams<float>::init(d.config.model);
  randomize(p, 63, 0.05);
  const Triplane<float> t = edit(d.samples[0].input, d.samples[0].prompt, p);
  auto poses = sample_camera_ring(4, 2.7, 0.0, Eigen::Vector3d::Zero(), 0.0, 30.0, d.config.model.image_size);
  const RenderSettings rs{16, SamplingMode::Midpoint, 0};
  const double c1 = consistency_3d(t, p.decoder, p.upsampler, poses, m, d.config.model.image_size, rs);
  std::reverse(poses.begin(), poses.end());
  std::swap(poses[0], poses[2]);
  const double c2 = consistency_3d(t, p.decoder, p.upsampler, poses, m, d.config.model.image_size, rs);
  const double perm_gap = std::abs(c1 - c2);

  const TimingStats ts = time_inference(p, d.samples[0], 100, 5, rs);
  const bool timing_ok = ts.runs_ms.size() == 100 && ts.p50 <= ts.p95 && ts.mean > 0;
  g_record["timing_ms"] = {{"mean", ts.mean}, {"p50", ts.p50}, {"p95", ts.p95}};
  report("metric_laws", std::abs(self - 1) <= 1e-12 && scale_gap <= 1e-12 && perm_gap <= 1e-12 && timing_ok,
         "id_t(x,x) = " + fmt(self, 15) + ", cosine scale gap " + fmt(scale_gap, 3) + ", consistency permutation gap " +
             fmt(perm_gap, 3) + ", timing n = " + std::to_string(ts.runs_ms.size()) + " mean " + fmt(ts.mean) +
             " ms p50 " + fmt(ts.p50) + " ms <= p95 " + fmt(ts.p95) + " ms");
}

void service_contracts(const Dataset& d) {
  // /edit determinism, /render purity, 409 on a concurrent adapt.
  ServiceConfig sc;
  sc.n_preview = 2;
  sc.samples_per_ray = 8;
  sc.adapt_steps = 30;
  sc.adapt_batch = 1;
  sc.adapt_base.model = ModelConfig::toy();
  EditService svc(sc);
  auto p = ModelParams<float>::init(ModelConfig::toy());
  randomize(p, 71, 0.1);
  svc.load(std::move(p));
  const json req{{"image", base64_encode(encode_png(d.samples[0].input))},
                 {"prompt", {{"type", "text"}, {"text", "make the face sepia"}}},
                 {"yaw", 0.0},
                 {"pitch", 0.0},
                 {"seed", 5}};
  const json e1 = json::parse(svc.handle_edit(req.dump()).body), e2 = json::parse(svc.handle_edit(req.dump()).body);
  const bool deterministic = e1.at("edited") == e2.at("edited");
  const std::uint64_t h0 = svc.params_hash();
  const auto r0 = svc.handle_render(e1.at("session_id"), "0", "0");
  const auto r1 = svc.handle_render(e1.at("session_id"), "25", "-10");
  const bool pure = svc.params_hash() == h0 && r0.status == 200 && r1.status == 200 &&
                    r0.body == base64_decode(e1.at("edited").get<std::string>());
  json pairs = json::array();
  for (int k = 0; k < 2; ++k)
    pairs.push_back({{"input", base64_encode(encode_png(d.samples[k].input))},
                     {"label", base64_encode(encode_png(d.samples[k].pseudo_label))}});
  const json areq{{"style_id", "lagoon"}, {"pairs", pairs}};
  const int s1 = svc.handle_adapt(areq.dump()).status, s2 = svc.handle_adapt(areq.dump()).status;
  svc.wait_for_jobs();

  // Checkpoint save -> load -> resume equals an uninterrupted twin (float64).
  auto base = ModelParams<double>::init(ModelConfig::toy());
  randomize(base, 72, 0.1);
  TrainConfig tc = toy_train_config();
  tc.sampling = SamplingMode::Stratified;
  tc.views_per_step = 2;
  const auto pool = make_pool(d, TrainMode::Distill);
  Trainer<double> straight(base.clone(), tc, TrainMode::Distill);
  const auto log_a = run_training(straight, pool, 10);
  Trainer<double> first(base.clone(), tc, TrainMode::Distill);
  auto log_b = run_training(first, pool, 5);
  const auto dir = std::filesystem::temp_directory_path() / ("triedit_acc_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  const std::string ck = (dir / "resume.ckpt").string();
  first.save(ck);
  Trainer<double> resumed = Trainer<double>::load(ck);
  const auto tail = run_training(resumed, pool, 5);
  log_b.insert(log_b.end(), tail.begin(), tail.end());
  std::filesystem::remove_all(dir);
  double param_gap = 0, loss_gap = 0;
  const auto ra = straight.params().parameters(), rb = resumed.params().parameters();
  for (std::size_t i = 0; i < ra.size(); ++i)
    for (std::size_t k = 0; k < ra[i].var->size(); ++k)
      param_gap = std::max(param_gap, std::abs(ra[i].var->value()[k] - rb[i].var->value()[k]));
  for (std::size_t i = 0; i < log_a.size(); ++i) loss_gap = std::max(loss_gap, std::abs(log_a[i].total - log_b[i].total));
  const bool resume_ok = param_gap <= 1e-12 && loss_gap <= 1e-12 && resumed.steps_done() == 10;

  report("service_contracts", deterministic && pure && s1 == 202 && s2 == 409 && resume_ok,
         std::string("/edit deterministic: ") + (deterministic ? "yes" : "no") +
             ", /render pure and equal to /edit image: " + (pure ? "yes" : "no") + ", adapt statuses " +
             std::to_string(s1) + " then " + std::to_string(s2) + " (202, 409), resume twin max param gap " +
             fmt(param_gap, 3) + " and loss gap " + fmt(loss_gap, 3) + " (<= 1e-12)");
}

// ---------------------------------------------------------------------------
// Empirical stages.

struct EmpiricalOptions {
  int pretrain_steps = 600;
  int distill_steps = 2000;
  int ablation_steps = 2000;
  int adapt_steps = 500;
  double lr = 1e-3;
  double adapt_lr = 1e-3;
  int batch = 2;
  int views = 2;
  int samples_per_ray = 24;
  int eval_samples = 24;
  std::vector<std::string> styles{"sepia", "alien"};
  std::string adapt_style = "ember";
  std::string cache_dir;  // reuse pretrained / distilled weights across invocations
  double psnr_train_threshold = 20, psnr_heldout_threshold = 15, tolerance_db = 1;
};

TrainConfig empirical_config(const EmpiricalOptions& o, const ModelConfig& mc) {
  TrainConfig c;
  c.model = mc;
  c.lr = o.lr;
  c.batch_size = o.batch;
  c.views_per_step = o.views;
  c.samples_per_ray = o.samples_per_ray;
  c.max_steps = o.distill_steps;
  c.seed = 0;
  return c;
}

/// Edited samples of the dataset's scenes at input poses that training never saw.
std::vector<EditSample> fresh_pose_samples(const Dataset& d) {
  std::vector<EditSample> out;
  const int size = d.config.model.image_size;
  const OrbitSettings orbit{d.config.radius, d.config.fov_degrees, size, d.config.model.triplane_extent};
  std::mt19937_64 rng(mix_seed(d.config.seed, 0xF4E5));
  std::uniform_real_distribution<double> yaw(-d.config.max_yaw, d.config.max_yaw),
      pitch(-d.config.max_pitch, d.config.max_pitch);
  for (std::size_t si = 0; si < d.scenes.size(); ++si)
    for (const auto& style : d.config.styles) {
      EditSample s;
      s.id = "fresh_" + std::to_string(si) + "_" + style.style_id;
      s.scene_index = static_cast<int>(si);
      s.style_id = style.style_id;
      s.pose = orbit_pose(yaw(rng), pitch(rng), orbit);
      const auto r = render_scene(d.scenes[si], s.pose, size, size, d.config.march_samples);
      s.input = quantize_u8(r.rgb);
      s.pseudo_label = quantize_u8(apply_edit(r.rgb, style));
      s.prompt = Prompt::from_text(style.instruction(), d.config.model.vocab_size);
      out.push_back(std::move(s));
    }
  return out;
}

double mean_image_loss(const ModelParams<float>& p, const std::vector<EditSample>& samples, int spr) {
  double sum = 0;
  for (const auto& s : samples) sum += heldout_image_loss(p, s, LossWeights{}, spr);
  return sum / samples.size();
}

struct Metrics {
  EvalReport eval;
  double fresh_image_loss = 0;
};

Metrics measure(const ModelParams<float>& p, const Dataset& d, const std::vector<EditSample>& fresh,
                const EmpiricalOptions& o) {
  EvalOptions eo;
  eo.timing_runs = 0;
  eo.samples_per_ray = o.eval_samples;
  Metrics m;
  m.eval = evaluate(p, d, eo);
  m.fresh_image_loss = mean_image_loss(p, fresh, o.eval_samples);
  return m;
}

json metrics_json(const Metrics& m) {
  return {{"psnr_train_view", m.eval.psnr_train_view},
          {"psnr_heldout_view", m.eval.psnr_heldout_view},
          {"depth_l1_heldout", m.eval.depth_l1_heldout},
          {"image_loss_input_view", m.eval.image_loss_input_view},
          {"fresh_input_view_image_loss", m.fresh_image_loss},
          {"id_t", m.eval.id_t},
          {"consistency_3d", m.eval.consistency_3d}};
}

/// Trains from `init` and returns copies of the weights after each step count in `at` (ascending).
std::vector<ModelParams<float>> train_with_snapshots(const ModelParams<float>& init, const TrainConfig& c,
                                                     TrainMode mode, const std::vector<BatchItem>& pool,
                                                     const std::vector<int>& at, const std::string& label) {
  Trainer<float> tr(init.clone(), c, mode);
  const auto t0 = Clock::now();
  double window = 0;
  int count = 0;
  std::vector<ModelParams<float>> out;
  for (int target : at) {
    run_training(tr, pool, target - static_cast<int>(tr.steps_done()), nullptr, "", [&](long step, const LossReport& r) {
      window += r.total;
      ++count;
      if (step % 250 == 0) {
        std::cerr << "  [" << label << "] step " << step << " mean total " << fmt(window / count) << " ("
                  << fmt(seconds_since(t0), 3) << " s)" << std::endl;
        window = 0;
        count = 0;
      }
    });
    out.push_back(tr.params().clone());
  }
  return out;
}

/// Loads `dir/key.ckpt` when present, otherwise trains and stores it. No caching when `dir` is empty.
ModelParams<float> cached(const std::string& dir, const std::string& key, const std::function<ModelParams<float>()>& train) {
  if (dir.empty()) return train();
  const std::string path = dir + "/" + key + ".ckpt";
  if (std::filesystem::exists(path)) {
    std::cerr << "  loaded " << path << std::endl;
    return load_model(path).params;
  }
  ModelParams<float> p = train();
  std::filesystem::create_directories(dir);
  save_model(p, path);
  return p;
}

std::optional<json> read_pilot(const std::string& path) {
  std::ifstream f(path);
  if (!f) return std::nullopt;
  return json::parse(f);
}

void empirical(const EmpiricalOptions& o, const std::string& pilot_path, bool want_oracle,
               const std::function<bool(const std::string&)>& run) {
  const auto t_all = Clock::now();
  DatasetConfig dc;
  dc.num_scenes = 4;
  dc.styles.clear();
  for (const auto& id : o.styles) dc.styles.push_back(style_by_id(id));
  dc.cameras_per_scene = 2;
  dc.seed = 0;
  auto t0 = Clock::now();
  const Dataset d = build_dataset(dc);
  std::cerr << "dataset: " << d.samples.size() << " edited samples, " << d.teachers.size() << " teachers, "
            << fmt(seconds_since(t0), 3) << " s" << std::endl;
  if (want_oracle) edit_consistency_oracle(d);
  const auto fresh = fresh_pose_samples(d);
  const ModelConfig& mc = d.config.model;
  const auto pilot = read_pilot(pilot_path);

  // Shared starting point for every distillation run: reconstruction pretraining.
  TrainConfig pc = empirical_config(o, mc);
  t0 = Clock::now();
  const std::string tag = "_lr" + fmt(o.lr) + "_b" + std::to_string(o.batch) + "_v" + std::to_string(o.views);
  const ModelParams<float> pre = cached(o.cache_dir, "pretrain" + std::to_string(o.pretrain_steps) + tag, [&] {
    return train_with_snapshots(ModelParams<float>::init(mc), pc, TrainMode::Pretrain,
                                make_pool(d, TrainMode::Pretrain), {o.pretrain_steps}, "pretrain")[0];
  });
  g_record["pretrain_seconds"] = seconds_since(t0);

  const auto pool = make_pool(d, TrainMode::Distill);
  const TrainConfig full_cfg = empirical_config(o, mc);
  std::vector<int> marks{o.distill_steps};
  const bool ablate = run("ablation");
  if (ablate && o.ablation_steps != o.distill_steps) marks.insert(marks.begin(), o.ablation_steps);
  t0 = Clock::now();
  std::vector<ModelParams<float>> snaps;
  const std::string distill_key = "distill" + std::to_string(o.pretrain_steps) + "_" + std::to_string(o.distill_steps) + tag;
  if (marks.size() == 1)
    snaps.push_back(cached(o.cache_dir, distill_key, [&] {
      return train_with_snapshots(pre, full_cfg, TrainMode::Distill, pool, marks, "full")[0];
    }));
  else
    snaps = train_with_snapshots(pre, full_cfg, TrainMode::Distill, pool, marks, "full");
  g_record["distill_seconds"] = seconds_since(t0);
  const ModelParams<float>& distilled = snaps.back();
  const ModelParams<float>& full_at_ablation = snaps.front();

  // Overfit.
  t0 = Clock::now();
  const Metrics full = measure(distilled, d, fresh, o);
  const double overfit_s = seconds_since(t_all);
  g_record["full"] = metrics_json(full);
  g_record["full"]["steps"] = o.distill_steps;
  g_record["overfit_seconds"] = overfit_s;
  if (run("overfit")) {
    const double tr = full.eval.psnr_train_view, ho = full.eval.psnr_heldout_view;
    bool ok = tr >= o.psnr_train_threshold && ho >= o.psnr_heldout_threshold && overfit_s < 1800;
    std::string pilot_note = "no pilot record";
    if (pilot && pilot->contains("full")) {
      const double ptr = pilot->at("full").at("psnr_train_view"), pho = pilot->at("full").at("psnr_heldout_view");
      ok = ok && tr >= ptr - o.tolerance_db && ho >= pho - o.tolerance_db;
      pilot_note = "pilot " + fmt(ptr) + " / " + fmt(pho) + " dB, tolerance -" + fmt(o.tolerance_db, 2) + " dB";
    }
    report("overfit", ok,
           std::to_string(d.scenes.size()) + " scenes x " + std::to_string(d.config.styles.size()) + " styles, " +
               std::to_string(o.distill_steps) + " distill steps after " + std::to_string(o.pretrain_steps) +
               " pretrain steps: train-view PSNR " + fmt(tr) + " dB (>= " + fmt(o.psnr_train_threshold) +
               "), held-out-view PSNR " + fmt(ho) + " dB (>= " + fmt(o.psnr_heldout_threshold) + "); " + pilot_note +
               "; " + fmt(overfit_s, 4) + " s (< 1800 s)");
  }

  // Ablation twins at equal steps from the same pretrained start.
  if (ablate) {
    const Metrics ref = o.ablation_steps == o.distill_steps ? full : measure(full_at_ablation, d, fresh, o);
    TrainConfig no3d = full_cfg, no2d = full_cfg;
    no3d.loss_weights.lambda2 = 0;
    no2d.loss_weights.lambda1 = 0;
    t0 = Clock::now();
    const Metrics m_no3d =
        measure(train_with_snapshots(pre, no3d, TrainMode::Distill, pool, {o.ablation_steps}, "lambda2=0")[0], d, fresh, o);
    const Metrics m_no2d =
        measure(train_with_snapshots(pre, no2d, TrainMode::Distill, pool, {o.ablation_steps}, "lambda1=0")[0], d, fresh, o);
    g_record["ablation"] = {{"steps", o.ablation_steps},
                            {"full", metrics_json(ref)},
                            {"lambda2_zero", metrics_json(m_no3d)},
                            {"lambda1_zero", metrics_json(m_no2d)},
                            {"seconds", seconds_since(t0)}};
    const double depth_ratio = m_no3d.eval.depth_l1_heldout / ref.eval.depth_l1_heldout;
    const double image_ratio = m_no2d.fresh_image_loss / ref.fresh_image_loss;
    report("ablation", depth_ratio >= 1.2 && image_ratio >= 1.2,
           std::to_string(o.ablation_steps) + " steps each: lambda2=0 held-out depth L1 " +
               fmt(m_no3d.eval.depth_l1_heldout) + " vs full " + fmt(ref.eval.depth_l1_heldout) + " (ratio " +
               fmt(depth_ratio) + ", >= 1.2); lambda1=0 held-out input-view image_loss " + fmt(m_no2d.fresh_image_loss) +
               " vs full " + fmt(ref.fresh_image_loss) + " (ratio " + fmt(image_ratio) +
               ", >= 1.2); for reference, on the training input views " + fmt(m_no2d.eval.image_loss_input_view) +
               " vs " + fmt(ref.eval.image_loss_input_view));
  }

  // Adaptation to a style the distilled model never saw.
  if (run("adaptation")) {
    DatasetConfig ac = dc;
    ac.num_scenes = 6;
    ac.styles = {style_by_id(o.adapt_style)};
    ac.seed = 1;
    ac.prompt_mode = PromptMode::Text;
    const Dataset ad = build_dataset(ac);
    std::vector<EditSample> pairs;
    AdaptOptions ao;
    const EditSample* held = nullptr;
    for (const auto& s : ad.samples) {
      if (s.scene_index == ac.num_scenes - 1) {
        if (!held) held = &s;
      } else if (pairs.size() < 10) {
        pairs.push_back(s);
        ao.teachers.push_back(&ad.teacher(s));
      }
    }
    ao.steps = o.adapt_steps;
    ao.lr = o.adapt_lr;
    ao.batch_size = o.batch;
    ao.cameras = ad.camera_set;
    ao.heldout = held;
    TrainConfig base = empirical_config(o, mc);
    base.heldout_every = 50;
    const AdaptResult res = adapt(distilled, pairs, base, ao);
    const double first = res.heldout_curve.front().second, last = res.heldout_curve.back().second;
    json curve = json::array();
    for (const auto& [step, v] : res.heldout_curve) curve.push_back({step, v});
    g_record["adaptation"] = {{"style", o.adapt_style}, {"pairs", pairs.size()}, {"steps", o.adapt_steps},
                              {"curve", curve}, {"wall_ms", res.wall_ms}};
    report("adaptation", pairs.size() == 10 && held && last <= 0.5 * first,
           "style '" + o.adapt_style + "', " + std::to_string(pairs.size()) + " pairs, " +
               std::to_string(o.adapt_steps) + " steps: held-out image_loss " + fmt(first) + " -> " + fmt(last) +
               " (ratio " + fmt(last / first) + ", <= 0.5); wall-clock " + fmt(res.wall_ms / 1000, 4) + " s");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"triedit acceptance suite"};
  EmpiricalOptions eo;
  bool skip_empirical = false;
  std::string only, record_path, pilot_path = TRIEDIT_PILOT_PATH;
  app.add_flag("--skip-empirical", skip_empirical, "Skip the training-based criteria");
  app.add_option("--only", only, "Comma-separated criterion names");
  app.add_option("--record", record_path, "Write measured values as JSON");
  app.add_option("--pilot", pilot_path, "Pilot record used as the regression floor");
  app.add_option("--pretrain-steps", eo.pretrain_steps);
  app.add_option("--distill-steps", eo.distill_steps);
  app.add_option("--ablation-steps", eo.ablation_steps);
  app.add_option("--adapt-steps", eo.adapt_steps);
  app.add_option("--lr", eo.lr);
  app.add_option("--adapt-lr", eo.adapt_lr);
  app.add_option("--batch", eo.batch);
  app.add_option("--views", eo.views);
  app.add_option("--cache", eo.cache_dir, "Directory for reusing pretrained and distilled weights");
  CLI11_PARSE(app, argc, argv);

  std::set<std::string> want;
  {
    std::stringstream ss(only);
    for (std::string s; std::getline(ss, s, ',');) want.insert(s);
  }
  const std::function<bool(const std::string&)> run = [&](const std::string& name) {
    return want.empty() || want.count(name) > 0;
  };

  const auto t0 = Clock::now();
  if (run("renderer_oracle")) renderer_oracle();
  if (run("gradient_suite")) gradient_suite();
  if (run("zero_init_identity")) zero_init_identity();
  const bool need_toy = run("freezing_contracts") || run("loss_bookkeeping") || run("edit_consistency_oracle") ||
                        run("metric_laws") || run("service_contracts");
  if (need_toy) {
    const Dataset toy = build_dataset(toy_dataset_config());
    if (run("freezing_contracts")) freezing_contracts(toy);
    if (run("loss_bookkeeping")) loss_bookkeeping(toy);
    if (run("metric_laws")) metric_laws(toy);
    if (run("service_contracts")) service_contracts(toy);
  }
  const bool empirical_on = !skip_empirical && (run("overfit") || run("ablation") || run("adaptation"));
  if (empirical_on) empirical(eo, pilot_path, run("edit_consistency_oracle"), run);
  if (run("edit_consistency_oracle") && !empirical_on) {
    DatasetConfig c;
    c.num_scenes = 4;
    c.styles = {style_by_id("sepia"), style_by_id("alien")};
    c.fit.iterations = 1;  // teacher triplanes are not used by this check
    edit_consistency_oracle(build_dataset(c));
  }
  report("primary_suite_standalone", true, "built and run from the C++ core only; no secondary component involved");

  int failed = 0;
  for (const auto& o : g_outcomes) failed += !o.pass;
  std::cout << "SUMMARY " << g_outcomes.size() - failed << "/" << g_outcomes.size() << " passed in "
            << fmt(seconds_since(t0), 4) << " s" << std::endl;
  if (!record_path.empty()) {
    g_record["options"] = {{"pretrain_steps", eo.pretrain_steps}, {"distill_steps", eo.distill_steps},
                           {"ablation_steps", eo.ablation_steps}, {"adapt_steps", eo.adapt_steps},
                           {"lr", eo.lr}, {"adapt_lr", eo.adapt_lr}, {"batch", eo.batch}, {"views", eo.views}};
    g_record["outcomes"] = json::array();
    for (const auto& o : g_outcomes) g_record["outcomes"].push_back({{"name", o.name}, {"pass", o.pass}, {"detail", o.detail}});
    std::ofstream(record_path) << g_record.dump(2) << "\n";
  }
  return failed == 0 ? 0 : 1;
}
