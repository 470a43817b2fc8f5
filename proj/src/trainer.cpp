// SPDX-License-Identifier: Apache-2.0
#include "triedit/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <ostream>
#include <sstream>

#include "triedit/hashing.hpp"
#include "triedit/image_io.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in native little-endian order");

namespace triedit {

std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Pretrain: return "pretrain";
    case TrainMode::Distill: return "distill_train";
    case TrainMode::Adapt: return "adapt";
  }
  return "?";
}

TrainMode mode_from_name(const std::string& s) {
  if (s == "pretrain") return TrainMode::Pretrain;
  if (s == "distill_train" || s == "distill") return TrainMode::Distill;
  if (s == "adapt") return TrainMode::Adapt;
  throw ValidationError("unknown training mode: " + s);
}

void TrainConfig::validate() const {
  require(lr > 0 && std::isfinite(lr), "lr must be > 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(max_steps >= 0, "max_steps must be >= 0");
  require(samples_per_ray >= 2, "samples_per_ray must be >= 2");
  require(views_per_step >= 0, "views_per_step must be >= 0");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0, "invalid Adam hyper-parameters");
  require(log_every >= 1, "log_every must be >= 1");
  require(checkpoint_every >= 0 && heldout_every >= 1, "invalid checkpoint/heldout period");
  loss_weights.validate();
  model.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"batch_size", c.batch_size},
                     {"max_steps", c.max_steps},
                     {"loss_weights", c.loss_weights},
                     {"model", c.model},
                     {"samples_per_ray", c.samples_per_ray},
                     {"sampling", c.sampling == SamplingMode::Stratified ? "stratified" : "midpoint"},
                     {"views_per_step", c.views_per_step},
                     {"clip_norm", c.clip_norm},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"log_every", c.log_every},
                     {"checkpoint_every", c.checkpoint_every},
                     {"heldout_every", c.heldout_every},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  try {
    require(j.is_object(), "train config must be a JSON object");
    const TrainConfig d;
    c.lr = j.value("lr", d.lr);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.max_steps = j.value("max_steps", d.max_steps);
    c.loss_weights = j.contains("loss_weights") ? j["loss_weights"].get<LossWeights>() : d.loss_weights;
    c.model = j.contains("model") ? j["model"].get<ModelConfig>() : d.model;
    c.samples_per_ray = j.value("samples_per_ray", d.samples_per_ray);
    const std::string sampling = j.value("sampling", std::string("stratified"));
    require(sampling == "stratified" || sampling == "midpoint", "sampling must be stratified or midpoint");
    c.sampling = sampling == "stratified" ? SamplingMode::Stratified : SamplingMode::Midpoint;
    c.views_per_step = j.value("views_per_step", d.views_per_step);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.eps = j.value("eps", d.eps);
    c.log_every = j.value("log_every", d.log_every);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.heldout_every = j.value("heldout_every", d.heldout_every);
    c.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid train config: ") + e.what());
  }
  c.validate();
}

nlohmann::json log_record(long step, const LossReport& r) {
  nlohmann::json j = r;
  j["step"] = step;
  return j;
}

// ---------------------------------------------------------------------------

template <typename Real>
Trainer<Real>::Trainer(ModelParams<Real> params, TrainConfig config, TrainMode mode)
    : params_(std::move(params)), config_(std::move(config)), mode_(mode), rng_(mix_seed(config_.seed, 77)) {
  config_.validate();
  opt_.moments.resize(params_.parameters().size());
}

namespace {

TeacherTargets subset_teacher(const TeacherTargets& t, const std::vector<int>& idx) {
  TeacherTargets s;
  s.t_gt = t.t_gt;
  for (int i : idx) {
    s.images.push_back(t.images[i]);
    s.depths.push_back(t.depths[i]);
    s.cameras.push_back(t.cameras[i]);
  }
  return s;
}

std::string report_str(const LossReport& r) {
  std::ostringstream os;
  os << "l_2d=" << r.l_2d << " l_3d=" << r.l_3d << " (image=" << r.l_3d_image << " triplane=" << r.l_3d_triplane
     << " depth=" << r.l_3d_depth << ") total=" << r.total;
  return os.str();
}

}  // namespace

template <typename Real>
LossReport Trainer<Real>::step(const std::vector<BatchItem>& batch) {
  require(!batch.empty(), "train step needs a non-empty batch");
  const FreezePolicy policy{mode_};
  params_.set_trainable([&](const ParamRef<Real>& p) { return policy.trainable(p); });
  auto refs = params_.parameters();
  for (auto& r : refs) r.var->zero_grad();

  const LossWeights& w = config_.loss_weights;
  const Real inv_b = Real(1) / static_cast<Real>(batch.size());
  LossReport rep;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const EditSample* s = batch[b].sample;
    const TeacherTargets* teacher = batch[b].teacher;
    require(s != nullptr && teacher != nullptr, "batch item is missing its sample or teacher");
    RenderSettings settings{config_.samples_per_ray, config_.sampling,
                            mix_seed(config_.seed, static_cast<std::uint64_t>(step_) * 4096 + b)};
    const auto img = ad::Var<Real>::constant(s->input.template cast<Real>());
    const ad::Var<Real> planes = mode_ == TrainMode::Pretrain ? reconstruct(img, params_) : edit(img, s->prompt, params_);

    TeacherTargets sub;
    const TeacherTargets* tt = teacher;
    const int n = static_cast<int>(teacher->cameras.size());
    if (config_.views_per_step > 0 && config_.views_per_step < n) {
      std::vector<int> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng_);
      idx.resize(config_.views_per_step);
      std::sort(idx.begin(), idx.end());
      sub = subset_teacher(*teacher, idx);
      tt = &sub;
    }

    std::vector<ad::Var<Real>> terms;
    std::vector<Real> weights;
    ad::Var<Real> l2d;
    if (w.lambda1 != 0) {
      l2d = loss_2d(s->pseudo_label.template cast<Real>(), planes, params_, s->pose, settings, w);
      terms.push_back(l2d);
      weights.push_back(static_cast<Real>(w.lambda1) * inv_b);
    } else {
      ad::NoGradGuard ng;
      l2d = loss_2d(s->pseudo_label.template cast<Real>(), planes, params_, s->pose, settings, w);
    }
    Loss3d<Real> l3d;
    if (w.lambda2 != 0) {
      l3d = loss_3d(planes, params_, *tt, settings, w);
      terms.push_back(l3d.total);
      weights.push_back(static_cast<Real>(w.lambda2) * inv_b);
    } else {
      ad::NoGradGuard ng;
      l3d = loss_3d(planes, params_, *tt, settings, w);
    }
    rep.l_2d += static_cast<double>(l2d.item());
    rep.l_3d += static_cast<double>(l3d.total.item());
    rep.l_3d_image += static_cast<double>(l3d.image.item());
    rep.l_3d_triplane += static_cast<double>(l3d.triplane.item());
    rep.l_3d_depth += static_cast<double>(l3d.depth.item());
    if (!terms.empty()) {
      const auto total = ad::weighted_sum(terms, weights);
      if (!std::isfinite(static_cast<double>(total.item()))) break;
      ad::backward(total);
    }
  }
  const double nb = static_cast<double>(batch.size());
  rep.l_2d /= nb;
  rep.l_3d /= nb;
  rep.l_3d_image /= nb;
  rep.l_3d_triplane /= nb;
  rep.l_3d_depth /= nb;
  rep.total = w.lambda1 * rep.l_2d + w.lambda2 * rep.l_3d;

  double sq = 0;
  for (const auto& r : refs)
    if (r.var->requires_grad() && r.var->has_grad())
      for (Real g : r.var->grad().storage()) sq += static_cast<double>(g) * static_cast<double>(g);
  grad_norm_ = std::sqrt(sq);
  if (!std::isfinite(rep.total) || !std::isfinite(grad_norm_))
    throw TrainingError("non-finite loss at step " + std::to_string(step_ + 1) + ": " + report_str(rep) +
                        " grad_norm=" + std::to_string(grad_norm_));
  const Real scale = config_.clip_norm > 0 && grad_norm_ > config_.clip_norm
                         ? static_cast<Real>(config_.clip_norm / grad_norm_)
                         : Real(1);
  const AdamHyper hyper = config_.adam();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    auto& v = *refs[i].var;
    if (!v.requires_grad()) continue;
    if (v.has_grad()) {
      adam_update(v.mutable_value(), v.grad(), opt_.moments[i], step_ + 1, hyper, scale);
    } else {
      adam_update(v.mutable_value(), Tensor<Real>(v.shape()), opt_.moments[i], step_ + 1, hyper, scale);
    }
    v.zero_grad();
  }
  ++step_;
  return rep;
}

template <typename Real>
LossReport Trainer<Real>::step_from(const std::vector<BatchItem>& pool) {
  require(!pool.empty(), "training pool is empty");
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<BatchItem> batch;
  for (int b = 0; b < config_.batch_size; ++b) batch.push_back(pool[pick(rng_)]);
  return step(batch);
}

// ---------------------------------------------------------------------------
// Checkpoints: "CHECKPOINT v1 <manifest bytes>\n" + manifest JSON + raw blob.

template <typename Real>
void Trainer<Real>::save(const std::string& path) const {
  const char* dtype = sizeof(Real) == 4 ? "float32" : "float64";
  nlohmann::json m;
  m["format"] = "triedit-checkpoint";
  m["dtype"] = dtype;
  m["mode"] = mode_name(mode_);
  m["step"] = step_;
  std::ostringstream rs;
  rs << rng_;
  m["rng_state"] = rs.str();
  m["clip_r_excluded"] = clip_r_excluded;
  m["train_config"] = config_;
  m["model_config"] = params_.config;
  auto& tensors = m["tensors"] = nlohmann::json::array();
  std::string blob;
  auto put = [&](const std::string& name, const std::string& kind, const Tensor<Real>& t) {
    tensors.push_back({{"name", name}, {"kind", kind}, {"shape", t.shape()}, {"offset", blob.size()}, {"count", t.size()}});
    blob.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(Real));
  };
  const auto refs = params_.parameters();
  for (std::size_t i = 0; i < refs.size(); ++i) put(refs[i].name, "param", refs[i].var->value());
  for (std::size_t i = 0; i < refs.size(); ++i)
    if (opt_.moments[i].m.size() > 0) {
      put(refs[i].name, "adam_m", opt_.moments[i].m);
      put(refs[i].name, "adam_v", opt_.moments[i].v);
    }
  Fnv1a h;
  h.update(blob);
  m["blob_bytes"] = blob.size();
  m["blob_hash"] = h.hex();
  const std::string manifest = m.dump();
  const std::string header = "CHECKPOINT v1 " + std::to_string(manifest.size()) + "\n";
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  write_file_atomic(path, header + manifest + blob);
}

template <typename Real>
Trainer<Real> Trainer<Real>::load(const std::string& path) {
  const std::string bytes = read_file(path);
  const auto nl = bytes.find('\n');
  const std::string magic = "CHECKPOINT v1 ";
  if (nl == std::string::npos || bytes.compare(0, magic.size(), magic) != 0)
    throw IoError("not a checkpoint file: " + path);
  std::size_t mlen = 0;
  try {
    mlen = std::stoull(bytes.substr(magic.size(), nl - magic.size()));
  } catch (const std::exception&) {
    throw IoError("corrupt checkpoint header: " + path);
  }
  if (nl + 1 + mlen > bytes.size()) throw IoError("truncated checkpoint manifest: " + path);
  try {
    const nlohmann::json m = nlohmann::json::parse(bytes.substr(nl + 1, mlen));
    if (m.at("format") != "triedit-checkpoint") throw IoError("unexpected checkpoint format in " + path);
    const std::string want = sizeof(Real) == 4 ? "float32" : "float64";
    if (m.at("dtype") != want) throw IoError("checkpoint dtype " + m["dtype"].get<std::string>() + " does not match " + want);
    const std::string blob = bytes.substr(nl + 1 + mlen);
    if (blob.size() != m.at("blob_bytes").get<std::size_t>()) throw IoError("checkpoint blob size mismatch: " + path);
    Fnv1a h;
    h.update(blob);
    if (h.hex() != m.at("blob_hash").get<std::string>()) throw IoError("checkpoint blob hash mismatch: " + path);

    const ModelConfig mc = m.at("model_config").get<ModelConfig>();
    const TrainConfig tc = m.at("train_config").get<TrainConfig>();
    Trainer t(ModelParams<Real>::init(mc), tc, mode_from_name(m.at("mode").get<std::string>()));
    auto refs = t.params_.parameters();
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < refs.size(); ++i) index[refs[i].name] = i;
    std::vector<bool> seen(refs.size(), false);
    for (const auto& e : m.at("tensors")) {
      const std::string name = e.at("name").get<std::string>(), kind = e.at("kind").get<std::string>();
      const auto it = index.find(name);
      if (it == index.end()) throw IoError("checkpoint has unknown tensor " + name);
      const Shape shape = e.at("shape").get<Shape>();
      const std::size_t off = e.at("offset").get<std::size_t>(), count = e.at("count").get<std::size_t>();
      if (count != shape_numel(shape) || off + count * sizeof(Real) > blob.size())
        throw IoError("checkpoint tensor " + name + " has an invalid extent");
      Tensor<Real> v(shape);
      std::memcpy(v.data(), blob.data() + off, count * sizeof(Real));
      const std::size_t i = it->second;
      if (kind == "param") {
        if (shape != refs[i].var->shape()) throw IoError("checkpoint tensor " + name + " has shape " + shape_str(shape));
        refs[i].var->mutable_value() = std::move(v);
        seen[i] = true;
      } else if (kind == "adam_m") {
        t.opt_.moments[i].m = std::move(v);
      } else if (kind == "adam_v") {
        t.opt_.moments[i].v = std::move(v);
      } else {
        throw IoError("checkpoint tensor kind " + kind + " is unknown");
      }
    }
    for (std::size_t i = 0; i < refs.size(); ++i)
      if (!seen[i]) throw IoError("checkpoint is missing parameter " + refs[i].name);
    t.step_ = m.at("step").get<long>();
    std::istringstream rs(m.at("rng_state").get<std::string>());
    rs >> t.rng_;
    if (!rs) throw IoError("checkpoint rng state is corrupt");
    t.clip_r_excluded = m.value("clip_r_excluded", false);
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint manifest in " + path + ": " + e.what());
  } catch (const ValidationError& e) {
    throw IoError("invalid checkpoint " + path + ": " + e.what());
  }
}

LoadedModel load_model(const std::string& path) {
  const std::string bytes = read_file(path);
  const auto nl = bytes.find('\n');
  std::string dtype;
  try {
    const std::size_t mlen = std::stoull(bytes.substr(14, nl - 14));
    dtype = nlohmann::json::parse(bytes.substr(nl + 1, mlen)).at("dtype").get<std::string>();
  } catch (const std::exception&) {
    throw IoError("not a readable checkpoint: " + path);
  }
  LoadedModel out;
  if (dtype == "float64") {
    auto t = Trainer<double>::load(path);
    out = {t.params().cast<float>(), t.mode(), t.steps_done(), t.clip_r_excluded};
  } else {
    auto t = Trainer<float>::load(path);
    out = {t.params().clone(), t.mode(), t.steps_done(), t.clip_r_excluded};
  }
  return out;
}

void save_model(const ModelParams<float>& params, const std::string& path, TrainMode mode, bool clip_r_excluded) {
  TrainConfig c;
  c.model = params.config;
  Trainer<float> t(params.clone(), c, mode);
  t.clip_r_excluded = clip_r_excluded;
  t.save(path);
}

// ---------------------------------------------------------------------------

template <typename Real>
std::vector<LossReport> run_training(Trainer<Real>& trainer, const std::vector<BatchItem>& pool, int steps,
                                     std::ostream* log, const std::string& checkpoint_path,
                                     const StepCallback& on_step) {
  std::vector<LossReport> out;
  const TrainConfig& c = trainer.config();
  for (int k = 0; k < steps; ++k) {
    const LossReport r = trainer.step_from(pool);
    out.push_back(r);
    const long s = trainer.steps_done();
    if (log && s % c.log_every == 0) *log << log_record(s, r).dump() << '\n' << std::flush;
    if (!checkpoint_path.empty() && c.checkpoint_every > 0 && s % c.checkpoint_every == 0) trainer.save(checkpoint_path);
    if (on_step) on_step(s, r);
  }
  return out;
}

std::vector<BatchItem> make_pool(const Dataset& d, TrainMode mode) {
  std::vector<BatchItem> pool;
  const auto& list = mode == TrainMode::Pretrain ? d.recon_samples : d.samples;
  for (const auto& s : list) pool.push_back({&s, &d.teacher(s)});
  return pool;
}

ModelParams<float> pretrain_reconstruction(const Dataset& data, const TrainConfig& config, std::ostream* log) {
  require(!data.recon_samples.empty(), "pretraining needs reconstruction samples");
  Trainer<float> t(ModelParams<float>::init(config.model), config, TrainMode::Pretrain);
  run_training(t, make_pool(data, TrainMode::Pretrain), config.max_steps, log);
  return t.params();
}

TeacherTargets reconstruct_teacher(const ModelParams<float>& params, const Tensorf& pseudo_label,
                                   const std::vector<CameraPose>& cameras, const RenderSettings& settings) {
  require(!cameras.empty(), "reconstruct_teacher: camera list must not be empty");
  TeacherTargets t;
  t.t_gt = reconstruct(pseudo_label, params);
  t.cameras = cameras;
  const int size = params.config.render_size();
  for (const auto& cam : cameras) {
    auto r = volume_render(t.t_gt, params.decoder, cam, size, size, settings);
    t.images.push_back(std::move(r.rgb_low));
    t.depths.push_back(std::move(r.depth));
  }
  return t;
}

double heldout_image_loss(const ModelParams<float>& params, const EditSample& s, const LossWeights& w,
                          int samples_per_ray) {
  const Triplane<float> t = edit(s.input, s.prompt, params);
  const RenderOutput r = render_model(t, params, s.pose, {samples_per_ray, SamplingMode::Midpoint, 0});
  return image_loss(r.rgb_final, s.pseudo_label, w);
}

AdaptResult adapt(const ModelParams<float>& params, const std::vector<EditSample>& pairs, const TrainConfig& base,
                  const AdaptOptions& options) {
  require(!pairs.empty(), "adapt needs at least one pair");
  require(options.steps >= 0, "adapt steps must be >= 0");
  require(options.teachers.empty() || options.teachers.size() == pairs.size(), "adapt: one teacher per pair");
  TrainConfig cfg = base;
  cfg.lr = options.lr;
  cfg.batch_size = options.batch_size;
  cfg.model = params.config;
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<CameraPose> cameras = options.cameras;
  if (cameras.empty()) {
    DatasetConfig dc;
    dc.model = params.config;
    cameras = make_camera_set(dc);
  }
  std::vector<TeacherTargets> own;
  own.reserve(pairs.size());
  std::vector<BatchItem> pool;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const TeacherTargets* t = options.teachers.empty() ? nullptr : options.teachers[i];
    if (!t) {
      own.push_back(reconstruct_teacher(params, pairs[i].pseudo_label, cameras,
                                        {cfg.samples_per_ray, SamplingMode::Midpoint, 0}));
      t = &own.back();
    }
    pool.push_back({&pairs[i], t});
  }
  AdaptResult res;
  Trainer<float> tr(params.clone(), cfg, TrainMode::Adapt);
  auto eval_heldout = [&](int step) {
    if (options.heldout)
      res.heldout_curve.emplace_back(step, heldout_image_loss(tr.params(), *options.heldout, cfg.loss_weights,
                                                               cfg.samples_per_ray));
  };
  eval_heldout(0);
  for (int k = 1; k <= options.steps; ++k) {
    res.losses.push_back(tr.step_from(pool));
    if (k % cfg.heldout_every == 0 || k == options.steps) eval_heldout(k);
    if (options.progress) options.progress(k, options.steps);
  }
  res.params = tr.params();
  res.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

template class Trainer<float>;
template class Trainer<double>;
template std::vector<LossReport> run_training<float>(Trainer<float>&, const std::vector<BatchItem>&, int, std::ostream*,
                                                     const std::string&, const StepCallback&);
template std::vector<LossReport> run_training<double>(Trainer<double>&, const std::vector<BatchItem>&, int, std::ostream*,
                                                      const std::string&, const StepCallback&);

}  // namespace triedit
