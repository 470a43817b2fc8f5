// SPDX-License-Identifier: Apache-2.0
#include "triedit/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>

#include "triedit/hashing.hpp"

namespace triedit {

EmbeddingModel EmbeddingModel::make(Kind kind, int dim) {
  require(dim >= 1, "embedding dim must be positive");
  EmbeddingModel m;
  m.kind_ = kind;
  m.dim_ = dim;
  std::mt19937_64 rng(kind == Kind::Identity ? 0x1D7 : 0xC11);
  std::normal_distribution<double> n01(0, 1);
  const int dims[3] = {3, 8, 16};
  for (int l = 0; l < 2; ++l) {
    Tensord w({3, 3, dims[l], dims[l + 1]});
    const double s = std::sqrt(2.0 / (9.0 * dims[l]));
    for (auto& v : w.storage()) v = s * n01(rng);
    m.conv_w_.push_back(std::move(w));
  }
  const int features = 16 * 4 * 4 + 1;
  m.proj_ = Tensord({features, dim});
  for (auto& v : m.proj_.storage()) v = n01(rng) / std::sqrt(static_cast<double>(features));
  return m;
}

std::vector<double> EmbeddingModel::embed(const Tensorf& img) const {
  require(img.rank() == 3 && img.dim(2) == 3 && img.dim(0) >= 4 && img.dim(1) >= 4, "embed: image must be [H, W, 3], H, W >= 4");
  ad::NoGradGuard ng;
  auto x = ad::Var<double>::constant(img.cast<double>());
  for (const auto& w : conv_w_) x = ad::silu(ad::conv2d(x, ad::Var<double>::constant(w), ad::Var<double>(), 2, 1));
  const Tensord& f = x.value();
  const int h = f.dim(0), wd = f.dim(1), c = f.dim(2);
  std::vector<double> pooled(16 * 4 * 4 + 1, 0.0);
  for (int by = 0; by < 4; ++by)
    for (int bx = 0; bx < 4; ++bx) {
      const int y0 = by * h / 4, y1 = std::max(y0 + 1, (by + 1) * h / 4);
      const int x0 = bx * wd / 4, x1 = std::max(x0 + 1, (bx + 1) * wd / 4);
      for (int y = y0; y < std::min(y1, h); ++y)
        for (int xx = x0; xx < std::min(x1, wd); ++xx)
          for (int k = 0; k < c; ++k) pooled[(by * 4 + bx) * c + k] += f[(static_cast<std::size_t>(y) * wd + xx) * c + k];
      const double area = static_cast<double>((std::min(y1, h) - y0) * (std::min(x1, wd) - x0));
      for (int k = 0; k < c; ++k) pooled[(by * 4 + bx) * c + k] /= area;
    }
  pooled.back() = 1.0;  // keeps black images away from the zero vector
  std::vector<double> out(dim_, 0.0);
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (int d = 0; d < dim_; ++d) out[d] += pooled[i] * proj_[i * dim_ + d];
  double norm = 0;
  for (double v : out) norm += v * v;
  norm = std::sqrt(norm);
  for (double& v : out) v /= norm;
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "cosine: dimension mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0;
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

double id_t(const Tensorf& input, const Tensorf& edited, const EmbeddingModel& m) {
  require(input.shape() == edited.shape(), "id_t: images must have the same resolution");
  return cosine(m.embed(input), m.embed(edited));
}

double clip_r(const Tensorf& edited, const Prompt& prompt, const EmbeddingModel& m,
              const std::map<std::string, Tensorf>& text_exemplars) {
  if (prompt.kind == Prompt::Kind::Image) return cosine(m.embed(edited), m.embed(prompt.image));
  const auto it = text_exemplars.find(prompt.text);
  require(it != text_exemplars.end(), "clip_r: no exemplar registered for text prompt '" + prompt.text + "'");
  return cosine(m.embed(edited), m.embed(it->second));
}

double consistency_3d(const Triplane<float>& t, const DecoderMLP<float>& decoder, const Upsampler<float>& upsampler,
                      const std::vector<CameraPose>& poses, const EmbeddingModel& m, int image_size,
                      const RenderSettings& settings) {
  require(poses.size() >= 2, "consistency_3d needs at least two poses");
  std::vector<std::vector<double>> emb;
  for (const auto& p : poses) emb.push_back(m.embed(render_full(t, decoder, upsampler, p, image_size, image_size, settings).rgb_final));
  double sum = 0;
  int pairs = 0;
  for (std::size_t i = 0; i < emb.size(); ++i)
    for (std::size_t j = i + 1; j < emb.size(); ++j) {
      sum += cosine(emb[i], emb[j]);
      ++pairs;
    }
  return sum / pairs;
}

TimingStats time_inference(const ModelParams<float>& params, const EditSample& sample, int n, int warmup,
                           const RenderSettings& settings) {
  require(n >= 1, "time_inference: n must be >= 1");
  require(warmup >= 0, "time_inference: warmup must be >= 0");
  TimingStats st;
  for (int k = 0; k < warmup + n; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    const Triplane<float> t = edit(sample.input, sample.prompt, params);
    const RenderOutput r = render_model(t, params, sample.pose, settings);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (k >= warmup) st.runs_ms.push_back(std::max(ms, 1e-6));
  }
  std::vector<double> s = st.runs_ms;
  std::sort(s.begin(), s.end());
  auto pct = [&](double q) {
    const double pos = q * (s.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (pos - lo) * (s[hi] - s[lo]);
  };
  st.mean = std::accumulate(s.begin(), s.end(), 0.0) / s.size();
  st.p50 = pct(0.5);
  st.p95 = pct(0.95);
  st.min = s.front();
  st.max = s.back();
  return st;
}

double psnr(const Tensorf& a, const Tensorf& b) {
  require(a.shape() == b.shape() && !a.empty(), "psnr: shape mismatch");
  double mse = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  return mse == 0 ? std::numeric_limits<double>::infinity() : -10.0 * std::log10(mse);
}

double masked_depth_l1(const Tensorf& pred, const Tensorf& reference) {
  require(pred.shape() == reference.shape(), "masked_depth_l1: shape mismatch");
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (reference[i] > 0) {
      sum += std::abs(static_cast<double>(pred[i]) - reference[i]);
      ++n;
    }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

std::vector<CameraPose> heldout_poses(const DatasetConfig& c, int image_size) {
  const OrbitSettings orbit{c.radius, c.fov_degrees, image_size, c.model.triplane_extent};
  return {orbit_pose(-35, 10, orbit), orbit_pose(35, -10, orbit), orbit_pose(0, 20, orbit)};
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"id_t", r.id_t},
                     {"consistency_3d", r.consistency_3d},
                     {"time_ms_mean", r.time_ms_mean},
                     {"time_ms_p50", r.time_ms_p50},
                     {"time_ms_p95", r.time_ms_p95},
                     {"n_samples", r.n_samples},
                     {"psnr_train_view", r.psnr_train_view},
                     {"psnr_heldout_view", r.psnr_heldout_view},
                     {"depth_l1_heldout", r.depth_l1_heldout},
                     {"image_loss_input_view", r.image_loss_input_view},
                     {"note", "metrics use fixed random stand-in embedders; values are not comparable to published numbers"}};
  j["clip_r"] = r.clip_r ? nlohmann::json(*r.clip_r) : nlohmann::json(nullptr);
}

EvalReport evaluate(const ModelParams<float>& params, const Dataset& data, const EvalOptions& options) {
  require(!data.samples.empty(), "evaluate: dataset has no edited samples");
  const EmbeddingModel id_model = EmbeddingModel::make(EmbeddingModel::Kind::Identity);
  const EmbeddingModel prompt_model = EmbeddingModel::make(EmbeddingModel::Kind::PromptSpace);
  std::map<std::string, Tensorf> text_exemplars;
  for (const auto& s : data.config.styles) text_exemplars[s.instruction()] = data.exemplars.at(s.style_id);
  const int size = params.config.image_size, low = params.config.render_size();
  const RenderSettings rs{options.samples_per_ray, SamplingMode::Midpoint, 0};
  const auto held = heldout_poses(data.config, size);
  const auto ring = sample_camera_ring(4, data.config.radius, 0.0, Eigen::Vector3d::Zero(), 0.0, data.config.fov_degrees, size);

  EvalReport rep;
  double sum_id = 0, sum_clip = 0, sum_cons = 0, sum_psnr = 0, sum_held = 0, sum_depth = 0, sum_loss = 0;
  int n_held = 0;
  std::map<std::string, std::vector<AnalyticRender>> truth_cache;
  const std::size_t n = options.max_samples > 0 ? std::min<std::size_t>(options.max_samples, data.samples.size())
                                                : data.samples.size();
  for (std::size_t i = 0; i < n; ++i) {
    const EditSample& s = data.samples[i];
    const Triplane<float> t = edit(s.input, s.prompt, params);
    const RenderOutput r = render_model(t, params, s.pose, rs);
    sum_id += id_t(s.input, r.rgb_final, id_model);
    sum_clip += clip_r(r.rgb_final, s.prompt, prompt_model, text_exemplars);
    sum_cons += consistency_3d(t, params.decoder, params.upsampler, ring, id_model, size, rs);
    sum_psnr += psnr(r.rgb_final, s.pseudo_label);
    sum_loss += image_loss(r.rgb_final, s.pseudo_label, options.loss_weights);
    const std::string key = std::to_string(s.scene_index) + "/" + s.style_id;
    auto& truth = truth_cache[key];
    if (truth.empty()) {
      const auto style = std::find_if(data.config.styles.begin(), data.config.styles.end(),
                                      [&](const EditStyle& e) { return e.style_id == s.style_id; });
      require(style != data.config.styles.end(), "evaluate: unknown style " + s.style_id);
      const SyntheticScene scene = data.scenes.at(s.scene_index).edited(*style);
      for (const auto& p : held) {
        AnalyticRender full = render_scene(scene, p, size, size, data.config.march_samples);
        full.depth = render_scene(scene, p.resized(static_cast<double>(low) / size), low, low, data.config.march_samples).depth;
        truth.push_back(std::move(full));
      }
    }
    for (std::size_t k = 0; k < held.size(); ++k) {
      const RenderOutput hv = render_model(t, params, held[k], rs);
      sum_held += psnr(hv.rgb_final, truth[k].rgb);
      sum_depth += masked_depth_l1(hv.depth, truth[k].depth);
      ++n_held;
    }
  }
  rep.n_samples = static_cast<int>(n);
  rep.id_t = sum_id / n;
  if (!options.clip_r_excluded) rep.clip_r = sum_clip / n;
  rep.consistency_3d = sum_cons / n;
  rep.psnr_train_view = sum_psnr / n;
  rep.image_loss_input_view = sum_loss / n;
  rep.psnr_heldout_view = sum_held / n_held;
  rep.depth_l1_heldout = sum_depth / n_held;
  if (options.timing_runs > 0) {
    const TimingStats ts = time_inference(params, data.samples.front(), options.timing_runs, options.timing_warmup, rs);
    rep.time_ms_mean = ts.mean;
    rep.time_ms_p50 = ts.p50;
    rep.time_ms_p95 = ts.p95;
  }
  return rep;
}

}  // namespace triedit
