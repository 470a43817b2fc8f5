// SPDX-License-Identifier: Apache-2.0
#include "triedit/synthetic.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <set>

#include "triedit/hashing.hpp"
#include "triedit/image_io.hpp"

namespace triedit {

namespace {

const Eigen::Vector3d kLuma(0.299, 0.587, 0.114);

Eigen::Vector3d vec3(const nlohmann::json& j) {
  require(j.is_array() && j.size() == 3, "expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

nlohmann::json vec_json(const Eigen::Vector3d& v) { return nlohmann::json::array({v[0], v[1], v[2]}); }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename T>
void hash_tensor(Fnv1a& h, const Tensor<T>& t) {
  h.update(t.data(), t.size() * sizeof(T));
}

std::string tensor_hash(const Tensorf& t) {
  Fnv1a h;
  hash_tensor(h, t);
  return h.hex();
}

}  // namespace

// ---------------------------------------------------------------------------
// EditStyle

Eigen::Matrix3d EditStyle::matrix() const {
  const Eigen::Vector3d u = Eigen::Vector3d::Ones().normalized();
  const Eigen::Matrix3d hue = Eigen::AngleAxisd(hue_degrees * std::numbers::pi / 180.0, u).toRotationMatrix();
  const Eigen::Matrix3d gray = u * u.transpose();
  const Eigen::Matrix3d sat = gray + saturation * (Eigen::Matrix3d::Identity() - gray);
  const Eigen::Matrix3d gain = (1.0 + value_offset) * Eigen::Matrix3d::Identity();
  Eigen::Matrix3d duo = Eigen::Matrix3d::Identity();
  if (duotone) duo = (1.0 - duotone_strength) * Eigen::Matrix3d::Identity() + duotone_strength * (*duotone) * kLuma.transpose();
  return duo * gain * sat * hue;
}

Eigen::Vector3d EditStyle::apply(const Eigen::Vector3d& rgb) const {
  if (is_identity()) return rgb;
  return (matrix() * rgb).cwiseMax(0.0).cwiseMin(1.0);
}

bool EditStyle::is_identity() const {
  return std::fmod(hue_degrees, 360.0) == 0 && saturation == 1 && value_offset == 0 &&
         (!duotone || duotone_strength == 0);
}

std::string EditStyle::instruction() const { return "make the face " + style_id; }

void EditStyle::validate() const {
  require(!style_id.empty(), "style_id must not be empty");
  require(std::isfinite(hue_degrees) && std::isfinite(saturation) && std::isfinite(value_offset),
          "style parameters must be finite");
  require(saturation >= 0, "style saturation must be non-negative");
  require(value_offset > -1, "style value_offset must exceed -1");
  require(duotone_strength >= 0 && duotone_strength <= 1, "duotone strength must be in [0, 1]");
  if (duotone)
    for (int c = 0; c < 3; ++c) require((*duotone)[c] >= 0 && (*duotone)[c] <= 1, "duotone colour must be in [0, 1]");
}

void to_json(nlohmann::json& j, const EditStyle& s) {
  j = nlohmann::json{{"style_id", s.style_id},
                     {"hue_degrees", s.hue_degrees},
                     {"saturation", s.saturation},
                     {"value_offset", s.value_offset},
                     {"duotone_strength", s.duotone_strength}};
  j["duotone"] = s.duotone ? vec_json(*s.duotone) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, EditStyle& s) {
  try {
    s.style_id = j.at("style_id").get<std::string>();
    s.hue_degrees = j.value("hue_degrees", 0.0);
    s.saturation = j.value("saturation", 1.0);
    s.value_offset = j.value("value_offset", 0.0);
    s.duotone_strength = j.value("duotone_strength", 0.0);
    s.duotone.reset();
    if (j.contains("duotone") && !j["duotone"].is_null()) s.duotone = vec3(j["duotone"]);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid style: ") + e.what());
  }
  s.validate();
}

const std::vector<EditStyle>& style_bank() {
  static const std::vector<EditStyle> bank = [] {
    auto tint = [](double r, double g, double b) { return std::optional<Eigen::Vector3d>(Eigen::Vector3d(r, g, b)); };
    std::vector<EditStyle> v{
        {"warm", 20, 1.2, 0.05, std::nullopt, 0},
        {"cool", -25, 1.1, 0, std::nullopt, 0},
        {"sepia", 0, 0.3, 0, tint(0.85, 0.65, 0.4), 0.6},
        {"noir", 0, 0, -0.1, std::nullopt, 0},
        {"pop", 0, 1.4, 0.1, std::nullopt, 0},
        {"faded", 0, 0.5, 0.15, std::nullopt, 0},
        {"teal", 0, 1, 0, tint(0.2, 0.7, 0.75), 0.5},
        {"rose", 0, 1, 0, tint(0.95, 0.5, 0.6), 0.45},
        {"gold", 0, 1, 0, tint(1.0, 0.8, 0.3), 0.5},
        {"alien", 120, 1.3, 0, std::nullopt, 0},
        {"opposite", 180, 1.2, 0, std::nullopt, 0},
        {"violet", -90, 1.3, 0, std::nullopt, 0},
        {"dusk", -40, 0.8, -0.2, std::nullopt, 0},
        {"sunny", 30, 1.1, 0.2, std::nullopt, 0},
        {"ghost", 0, 0.2, 0.2, std::nullopt, 0},
        {"ember", 0, 1, 0, tint(1.0, 0.35, 0.15), 0.55},
        {"forest", 0, 1, 0, tint(0.25, 0.6, 0.3), 0.5},
        {"moon", 0, 0.1, -0.25, tint(0.7, 0.75, 0.95), 0.3},
        {"candy", 60, 1.4, 0.05, std::nullopt, 0},
        {"steel", 0, 0.3, 0, tint(0.55, 0.65, 0.75), 0.4},
    };
    return v;
  }();
  return bank;
}

EditStyle style_by_id(const std::string& id) {
  if (id == "identity") return EditStyle::identity();
  for (const auto& s : style_bank())
    if (s.style_id == id) return s;
  throw ValidationError("unknown style id: " + id);
}

Tensorf apply_edit(const Tensorf& img, const EditStyle& style) {
  require(img.rank() == 3 && img.dim(2) == 3, "apply_edit: image must be [H, W, 3]");
  style.validate();
  if (style.is_identity()) return img;
  const Eigen::Matrix3d m = style.matrix();
  Tensorf out(img.shape());
  for (std::size_t p = 0; p < img.size(); p += 3) {
    const Eigen::Vector3d c(img[p], img[p + 1], img[p + 2]);
    const Eigen::Vector3d e = (m * c).cwiseMax(0.0).cwiseMin(1.0);
    for (int k = 0; k < 3; ++k) out[p + k] = static_cast<float>(e[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenes

double Primitive::normalized_distance(const Eigen::Vector3d& p) const {
  const Eigen::Vector3d q = (p - center).cwiseQuotient(radii);
  return kind == Kind::Ellipsoid ? q.norm() : q.cwiseAbs().maxCoeff();
}

namespace {

// Unedited colour and density at p.
void base_field(const SyntheticScene& s, const Eigen::Vector3d& x, double& density, Eigen::Vector3d& c) {
  density = 0;
  c.setZero();
  for (std::size_t k = 0; k < s.primitives.size(); ++k) {
    const Primitive& pr = s.primitives[k];
    const double o = stable_sigmoid((1.0 - pr.normalized_distance(x)) * pr.radii.minCoeff() / s.softness);
    density = std::max(density, pr.sigma0 * o);
    c = k == 0 ? pr.rgb : Eigen::Vector3d(c + o * (pr.rgb - c));
  }
}

// Field evaluator with the style matrix computed once.
struct StyledField {
  const SyntheticScene* scene;
  bool identity;
  Eigen::Matrix3d m;

  explicit StyledField(const SyntheticScene& s) : scene(&s), identity(s.style.is_identity()), m(s.style.matrix()) {}
  void operator()(const Eigen::Vector3d& x, double& density, double* rgb) const {
    Eigen::Vector3d c;
    base_field(*scene, x, density, c);
    if (!identity) c = (m * c).cwiseMax(0.0).cwiseMin(1.0);
    for (int k = 0; k < 3; ++k) rgb[k] = c[k];
  }
};

}  // namespace

void SyntheticScene::field(const double* p, double& density, double* rgb) const {
  StyledField(*this)(Eigen::Vector3d(p[0], p[1], p[2]), density, rgb);
}

FieldFunction SyntheticScene::field_function() const {
  auto scene = std::make_shared<const SyntheticScene>(*this);
  auto f = std::make_shared<StyledField>(*scene);
  return [scene, f](const double* p, double& density, double* rgb) {
    (*f)(Eigen::Vector3d(p[0], p[1], p[2]), density, rgb);
  };
}

SyntheticScene SyntheticScene::edited(const EditStyle& s) const {
  s.validate();
  SyntheticScene out = *this;
  out.style = s;
  return out;
}

void SyntheticScene::validate() const {
  require(softness > 0 && std::isfinite(softness), "scene softness must be positive");
  for (const auto& p : primitives) {
    require(p.sigma0 > 0, "primitive density must be positive");
    require((p.radii.array() > 0).all(), "primitive radii must be positive");
    require(((p.center.cwiseAbs() + p.radii).array() <= 1.0 + 1e-12).all(), "primitive leaves the unit cube");
    require((p.rgb.array() >= 0).all() && (p.rgb.array() <= 1).all(), "primitive colour must be in [0, 1]");
  }
  style.validate();
}

std::uint64_t SyntheticScene::parameter_hash() const {
  Fnv1a h;
  for (const auto& p : primitives) {
    const int kind = static_cast<int>(p.kind);
    h.update(&kind, sizeof kind);
    h.update(p.center.data(), 3 * sizeof(double));
    h.update(p.radii.data(), 3 * sizeof(double));
    h.update(&p.sigma0, sizeof(double));
    h.update(p.rgb.data(), 3 * sizeof(double));
  }
  h.update(&softness, sizeof softness);
  return h.value();
}

void to_json(nlohmann::json& j, const SyntheticScene& s) {
  j = nlohmann::json{{"seed", s.seed}, {"softness", s.softness}, {"style", s.style}};
  auto& prims = j["primitives"] = nlohmann::json::array();
  for (const auto& p : s.primitives)
    prims.push_back({{"kind", p.kind == Primitive::Kind::Box ? "box" : "ellipsoid"},
                     {"role", p.role},
                     {"center", vec_json(p.center)},
                     {"radii", vec_json(p.radii)},
                     {"sigma0", p.sigma0},
                     {"rgb", vec_json(p.rgb)}});
}

void from_json(const nlohmann::json& j, SyntheticScene& s) {
  try {
    s.seed = j.at("seed").get<std::uint64_t>();
    s.softness = j.at("softness").get<double>();
    s.style = j.at("style").get<EditStyle>();
    s.primitives.clear();
    for (const auto& pj : j.at("primitives")) {
      Primitive p;
      const std::string kind = pj.at("kind").get<std::string>();
      require(kind == "box" || kind == "ellipsoid", "unknown primitive kind: " + kind);
      p.kind = kind == "box" ? Primitive::Kind::Box : Primitive::Kind::Ellipsoid;
      p.role = pj.value("role", "");
      p.center = vec3(pj.at("center"));
      p.radii = vec3(pj.at("radii"));
      p.sigma0 = pj.at("sigma0").get<double>();
      p.rgb = vec3(pj.at("rgb"));
      s.primitives.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid scene: ") + e.what());
  }
  s.validate();
}

SyntheticScene generate_scene(std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x5CE));
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  // Colours with mean in [0.3, 0.55] and chroma radius at most 0.2.
  const Eigen::Vector3d e1 = Eigen::Vector3d(1, -1, 0).normalized();
  const Eigen::Vector3d e2 = Eigen::Vector3d(1, 1, -2).normalized();
  auto colour = [&](double mean_lo, double mean_hi) {
    const double m = uni(mean_lo, mean_hi), r = uni(0.04, 0.2), phi = uni(0, 2 * std::numbers::pi);
    return Eigen::Vector3d(Eigen::Vector3d::Constant(m) + r * (std::cos(phi) * e1 + std::sin(phi) * e2));
  };

  SyntheticScene s;
  s.seed = seed;
  Primitive head;
  head.role = "head";
  head.center = {0, uni(-0.05, 0.05), 0};
  head.radii = {uni(0.55, 0.68), uni(0.68, 0.82), uni(0.55, 0.68)};
  head.sigma0 = uni(25, 40);
  head.rgb = colour(0.4, 0.55);
  s.primitives.push_back(head);

  auto surface_z = [&](double x, double y) {
    const double qx = x / head.radii.x(), qy = (y - head.center.y()) / head.radii.y();
    return head.radii.z() * std::sqrt(std::max(0.05, 1.0 - qx * qx - qy * qy));
  };
  std::vector<std::string> roles{"nose", "mouth", "left_eye", "right_eye", "hair"};
  std::shuffle(roles.begin(), roles.end(), rng);
  const int n_features = 1 + static_cast<int>(rng() % 4);
  for (int f = 0; f < n_features; ++f) {
    Primitive p;
    p.role = roles[f];
    p.sigma0 = uni(25, 40);
    p.rgb = colour(0.3, 0.55);
    if (p.role == "nose") {
      const double y = uni(-0.15, 0.0);
      p.center = {0, y, surface_z(0, y) * uni(0.9, 0.98)};
      p.radii = {uni(0.07, 0.11), uni(0.1, 0.15), uni(0.1, 0.16)};
    } else if (p.role == "mouth") {
      p.kind = Primitive::Kind::Box;
      const double y = uni(-0.42, -0.3);
      p.center = {0, y, surface_z(0, y) * uni(0.85, 0.92)};
      p.radii = {uni(0.12, 0.2), uni(0.03, 0.05), uni(0.05, 0.08)};
    } else if (p.role == "left_eye" || p.role == "right_eye") {
      const double x = (p.role == "left_eye" ? -1 : 1) * uni(0.18, 0.26), y = uni(0.1, 0.2);
      p.center = {x, y, surface_z(x, y) * 0.92};
      p.radii = Eigen::Vector3d::Constant(uni(0.07, 0.11));
    } else {
      p.kind = Primitive::Kind::Box;
      p.radii = {head.radii.x() * uni(0.8, 1.0), uni(0.12, 0.2), head.radii.z() * uni(0.8, 1.0)};
      p.center = {0, head.center.y() + head.radii.y() * uni(0.75, 0.85), -0.05};
    }
    s.primitives.push_back(p);
  }
  for (auto& p : s.primitives)
    for (int a = 0; a < 3; ++a) {
      p.radii[a] = std::min(p.radii[a], 0.9);
      p.center[a] = std::clamp(p.center[a], -0.98 + p.radii[a], 0.98 - p.radii[a]);
    }
  s.validate();
  return s;
}

SyntheticScene sphere_scene(double radius, double sigma0, const Eigen::Vector3d& rgb, double softness) {
  SyntheticScene s;
  Primitive p;
  p.role = "sphere";
  p.radii = Eigen::Vector3d::Constant(radius);
  p.sigma0 = sigma0;
  p.rgb = rgb;
  s.primitives.push_back(p);
  s.softness = softness;
  s.validate();
  return s;
}

AnalyticRender render_scene(const SyntheticScene& scene, const CameraPose& pose, int height, int width, int samples) {
  require(samples >= 2, "render_scene: need at least 2 samples per ray");
  const RayBundle rays = generate_rays(pose, height, width);
  AnalyticRender out{Tensorf({height, width, 3}), Tensorf({height, width}), Tensorf({height, width})};
  const double delta = (rays.t_far - rays.t_near) / samples;
  const StyledField field(scene);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) {
      const Eigen::Vector3d o = rays.origin(i, j), d = rays.direction(i, j);
      double trans = 1, acc = 0, dsum = 0, rgb[3] = {0, 0, 0};
      for (int s = 0; s < samples; ++s) {
        const double t = rays.t_near + (s + 0.5) * delta;
        const Eigen::Vector3d x = o + t * d;
        double sigma = 0, c[3];
        field(x, sigma, c);
        const double a = 1.0 - std::exp(-sigma * delta);
        const double w = trans * a;
        for (int k = 0; k < 3; ++k) rgb[k] += w * c[k];
        acc += w;
        dsum += w * t;
        trans *= 1.0 - a;
      }
      const std::size_t px = static_cast<std::size_t>(i) * width + j;
      for (int k = 0; k < 3; ++k) out.rgb[px * 3 + k] = static_cast<float>(rgb[k]);
      out.acc[px] = static_cast<float>(acc);
      out.depth[px] = acc > kAccEpsilon ? static_cast<float>(dsum / acc) : 0.f;
    }
  return out;
}

Triplane<float> fit_triplane_to_scene(const SyntheticScene& scene, const DecoderMLP<float>& decoder,
                                      const FitOptions& options) {
  scene.validate();
  return fit_triplane_to_field(scene.field_function(), decoder, options);
}

TeacherTargets teacher_infer(const SyntheticScene& scene_after_edit, const std::vector<CameraPose>& cameras,
                             const DecoderMLP<float>& decoder, const TeacherOptions& options) {
  require(!cameras.empty(), "teacher_infer: camera list must not be empty");
  require(options.render_size >= 1, "teacher_infer: render_size must be positive");
  TeacherTargets t;
  t.t_gt = fit_triplane_to_scene(scene_after_edit, decoder, options.fit);
  t.cameras = cameras;
  for (const auto& cam : cameras) {
    auto r = render_scene(scene_after_edit, cam, options.render_size, options.render_size, options.march_samples);
    t.images.push_back(quantize_u8(r.rgb));
    t.depths.push_back(std::move(r.depth));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Dataset

namespace {

std::string prompt_mode_name(PromptMode m) {
  switch (m) {
    case PromptMode::Text: return "text";
    case PromptMode::Image: return "image";
    case PromptMode::Mixed: return "mixed";
  }
  return "?";
}

PromptMode prompt_mode_from(const std::string& s) {
  if (s == "text") return PromptMode::Text;
  if (s == "image") return PromptMode::Image;
  if (s == "mixed") return PromptMode::Mixed;
  throw ValidationError("prompt_mode must be text, image or mixed");
}

nlohmann::json fit_json(const FitOptions& f) {
  return {{"grid", f.grid},       {"iterations", f.iterations}, {"batch", f.batch},
          {"lr", f.lr},           {"color_weight", f.color_weight}, {"min_raw_density", f.min_raw_density}};
}

FitOptions fit_from(const nlohmann::json& j) {
  FitOptions f;
  f.grid = j.value("grid", f.grid);
  f.iterations = j.value("iterations", f.iterations);
  f.batch = j.value("batch", f.batch);
  f.lr = j.value("lr", f.lr);
  f.color_weight = j.value("color_weight", f.color_weight);
  f.min_raw_density = j.value("min_raw_density", f.min_raw_density);
  return f;
}

FitOptions teacher_fit(const DatasetConfig& c, std::uint64_t stream) {
  FitOptions f = c.fit;
  f.channels = c.model.triplane_channels;
  f.resolution = c.model.triplane_resolution;
  f.extent = c.model.triplane_extent;
  f.seed = mix_seed(c.seed, stream);
  return f;
}

}  // namespace

void DatasetConfig::validate() const {
  require(num_scenes >= 1, "num_scenes must be >= 1");
  require(!styles.empty(), "dataset needs at least one style");
  std::set<std::string> ids;
  for (const auto& s : styles) {
    s.validate();
    require(s.style_id != "identity", "style id 'identity' is reserved");
    require(ids.insert(s.style_id).second, "duplicate style id: " + s.style_id);
  }
  require(cameras_per_scene >= 1, "cameras_per_scene must be >= 1");
  require(camera_set_size >= 1, "camera_set_size must be >= 1");
  require(camera_set == "front_arc" || camera_set == "ring", "camera_set must be front_arc or ring");
  require(max_yaw >= 0 && max_yaw <= 90 && max_pitch >= 0 && max_pitch <= 45, "pose ranges out of bounds");
  require(radius > 0 && fov_degrees > 0 && fov_degrees < 180, "invalid orbit radius or fov");
  require(march_samples >= 2, "march_samples must be >= 2");
  model.validate();
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"num_scenes", c.num_scenes},
                     {"styles", c.styles},
                     {"cameras_per_scene", c.cameras_per_scene},
                     {"camera_set", c.camera_set},
                     {"camera_set_size", c.camera_set_size},
                     {"max_yaw", c.max_yaw},
                     {"max_pitch", c.max_pitch},
                     {"radius", c.radius},
                     {"fov_degrees", c.fov_degrees},
                     {"march_samples", c.march_samples},
                     {"prompt_mode", prompt_mode_name(c.prompt_mode)},
                     {"fit", fit_json(c.fit)},
                     {"model", c.model},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  try {
    const DatasetConfig d;
    c.num_scenes = j.value("num_scenes", d.num_scenes);
    c.styles.clear();
    if (j.contains("styles"))
      for (const auto& s : j["styles"]) c.styles.push_back(s.is_string() ? style_by_id(s.get<std::string>()) : s.get<EditStyle>());
    c.cameras_per_scene = j.value("cameras_per_scene", d.cameras_per_scene);
    c.camera_set = j.value("camera_set", d.camera_set);
    c.camera_set_size = j.value("camera_set_size", d.camera_set_size);
    c.max_yaw = j.value("max_yaw", d.max_yaw);
    c.max_pitch = j.value("max_pitch", d.max_pitch);
    c.radius = j.value("radius", d.radius);
    c.fov_degrees = j.value("fov_degrees", d.fov_degrees);
    c.march_samples = j.value("march_samples", d.march_samples);
    c.prompt_mode = prompt_mode_from(j.value("prompt_mode", std::string("mixed")));
    c.fit = j.contains("fit") ? fit_from(j["fit"]) : d.fit;
    c.model = j.contains("model") ? j["model"].get<ModelConfig>() : d.model;
    c.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid dataset config: ") + e.what());
  }
  c.validate();
}

std::vector<CameraPose> make_camera_set(const DatasetConfig& c) {
  const int n = c.camera_set_size, size = c.model.render_size();
  if (c.camera_set == "ring")
    return sample_camera_ring(n, c.radius, 0.0, Eigen::Vector3d::Zero(), 0.0, c.fov_degrees, size);
  OrbitSettings orbit{c.radius, c.fov_degrees, size, c.model.triplane_extent};
  std::vector<CameraPose> out;
  for (int k = 0; k < n; ++k) {
    const double yaw = n == 1 ? 0.0 : -45.0 + 90.0 * k / (n - 1);
    out.push_back(orbit_pose(yaw, 0.0, orbit));
  }
  return out;
}

Dataset build_dataset(const DatasetConfig& config) {
  config.validate();
  Dataset d;
  d.config = config;
  d.camera_set = make_camera_set(config);
  const ModelConfig& mc = config.model;
  const int size = mc.image_size;
  const DecoderMLP<float> decoder = canonical_decoder(mc);
  const OrbitSettings input_orbit{config.radius, config.fov_degrees, size, mc.triplane_extent};

  // Exemplars come from a scene that never appears among the training scenes.
  const SyntheticScene exemplar_scene = generate_scene(mix_seed(config.seed, 0xE7E));
  const CameraPose front = orbit_pose(0, 0, input_orbit);
  const Tensorf exemplar_base = render_scene(exemplar_scene, front, size, size, config.march_samples).rgb;
  for (const auto& s : config.styles) d.exemplars[s.style_id] = quantize_u8(apply_edit(exemplar_base, s));

  std::vector<EditStyle> slots{EditStyle::identity()};
  slots.insert(slots.end(), config.styles.begin(), config.styles.end());
  int prompt_counter = 0;
  for (int si = 0; si < config.num_scenes; ++si) {
    const std::uint64_t scene_seed = mix_seed(config.seed, 100 + si);
    const SyntheticScene scene = generate_scene(scene_seed);
    d.scenes.push_back(scene);
    TeacherOptions topt;
    topt.render_size = mc.render_size();
    topt.march_samples = config.march_samples;
    const int teacher_base = static_cast<int>(d.teachers.size());
    for (std::size_t k = 0; k < slots.size(); ++k) {
      topt.fit = teacher_fit(config, 1000 + si * 64 + k);
      d.teachers.push_back(teacher_infer(scene.edited(slots[k]), d.camera_set, decoder, topt));
      d.teacher_styles.push_back(slots[k].style_id);
      d.teacher_scenes.push_back(si);
    }
    std::mt19937_64 rng(mix_seed(config.seed, 2000 + si));
    std::uniform_real_distribution<double> yaw(-config.max_yaw, config.max_yaw), pitch(-config.max_pitch, config.max_pitch);
    for (int ci = 0; ci < config.cameras_per_scene; ++ci) {
      const double y = yaw(rng), p = pitch(rng);
      const CameraPose pose = orbit_pose(y, p, input_orbit);
      const Tensorf base = render_scene(scene, pose, size, size, config.march_samples).rgb;
      EditSample recon;
      recon.id = "sc" + std::to_string(si) + "_identity_" + std::to_string(ci);
      recon.scene_index = si;
      recon.scene_seed = scene_seed;
      recon.style_id = "identity";
      recon.input = quantize_u8(base);
      recon.pose = pose;
      recon.prompt = Prompt::from_text(EditStyle::identity().instruction(), mc.vocab_size);
      recon.pseudo_label = recon.input;
      recon.teacher_index = teacher_base;
      d.recon_samples.push_back(recon);
      for (std::size_t k = 1; k < slots.size(); ++k) {
        const EditStyle& style = slots[k];
        EditSample s = recon;
        s.id = "sc" + std::to_string(si) + "_" + style.style_id + "_" + std::to_string(ci);
        s.style_id = style.style_id;
        s.pseudo_label = quantize_u8(render_scene(scene.edited(style), pose, size, size, config.march_samples).rgb);
        const bool text = config.prompt_mode == PromptMode::Text ||
                          (config.prompt_mode == PromptMode::Mixed && prompt_counter % 2 == 0);
        s.prompt = text ? Prompt::from_text(style.instruction(), mc.vocab_size)
                        : Prompt::from_image(d.exemplars.at(style.style_id));
        s.teacher_index = teacher_base + static_cast<int>(k);
        d.samples.push_back(std::move(s));
        ++prompt_counter;
      }
    }
  }
  return d;
}

Dataset build_dataset(int num_scenes, const std::vector<EditStyle>& styles, int cameras_per_scene, std::uint64_t seed) {
  DatasetConfig c;
  c.num_scenes = num_scenes;
  c.styles = styles;
  c.cameras_per_scene = cameras_per_scene;
  c.seed = seed;
  return build_dataset(c);
}

namespace {

nlohmann::json sample_json(const EditSample& s) {
  nlohmann::json j{{"id", s.id},
                   {"scene", s.scene_index},
                   {"scene_seed", s.scene_seed},
                   {"style", s.style_id},
                   {"pose", s.pose},
                   {"input", "images/" + s.id + "_input.png"},
                   {"input_hash", tensor_hash(s.input)},
                   {"label", "images/" + s.id + "_label.png"},
                   {"label_hash", tensor_hash(s.pseudo_label)},
                   {"teacher", s.teacher_index}};
  if (s.prompt.kind == Prompt::Kind::Text)
    j["prompt"] = {{"type", "text"}, {"text", s.prompt.text}};
  else
    j["prompt"] = {{"type", "image"}, {"exemplar", s.style_id}};
  return j;
}

std::string teacher_dir(const Dataset& d, std::size_t t) {
  return "teachers/sc" + std::to_string(d.teacher_scenes[t]) + "_" + d.teacher_styles[t];
}

}  // namespace

nlohmann::json dataset_manifest(const Dataset& d) {
  nlohmann::json m;
  m["format"] = "triedit-dataset v1";
  m["config"] = d.config;
  m["scenes"] = d.scenes;
  m["camera_set"] = d.camera_set;
  auto& ex = m["exemplars"] = nlohmann::json::object();
  for (const auto& [id, img] : d.exemplars) ex[id] = {{"file", "exemplars/" + id + ".png"}, {"hash", tensor_hash(img)}};
  auto& teachers = m["teachers"] = nlohmann::json::array();
  for (std::size_t t = 0; t < d.teachers.size(); ++t) {
    const auto& tt = d.teachers[t];
    const std::string dir = teacher_dir(d, t);
    Fnv1a th;
    hash_tensor(th, tt.t_gt.planes);
    nlohmann::json tj{{"scene", d.teacher_scenes[t]},
                      {"style", d.teacher_styles[t]},
                      {"t_gt", dir + "/t_gt.triplane"},
                      {"t_gt_hash", th.hex()}};
    auto& views = tj["views"] = nlohmann::json::array();
    for (std::size_t k = 0; k < tt.cameras.size(); ++k)
      views.push_back({{"image", dir + "/view" + std::to_string(k) + ".png"},
                       {"image_hash", tensor_hash(tt.images[k])},
                       {"depth", dir + "/view" + std::to_string(k) + ".depth"},
                       {"depth_hash", tensor_hash(tt.depths[k])}});
    teachers.push_back(std::move(tj));
  }
  auto& samples = m["samples"] = nlohmann::json::array();
  for (const auto& s : d.samples) samples.push_back(sample_json(s));
  auto& recon = m["recon_samples"] = nlohmann::json::array();
  for (const auto& s : d.recon_samples) recon.push_back(sample_json(s));
  return m;
}

std::string Dataset::hash() const {
  Fnv1a h;
  h.update(dataset_manifest(*this).dump());
  return h.hex();
}

void save_dataset(const Dataset& d, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "exemplars");
  const nlohmann::json m = dataset_manifest(d);
  for (const auto& [id, img] : d.exemplars) write_png(dir + "/exemplars/" + id + ".png", img);
  for (std::size_t t = 0; t < d.teachers.size(); ++t) {
    fs::create_directories(fs::path(dir) / teacher_dir(d, t));
    const auto& tj = m["teachers"][t];
    save_triplane(dir + "/" + tj["t_gt"].get<std::string>(), d.teachers[t].t_gt);
    for (std::size_t k = 0; k < d.teachers[t].cameras.size(); ++k) {
      write_png(dir + "/" + tj["views"][k]["image"].get<std::string>(), d.teachers[t].images[k]);
      save_depth(dir + "/" + tj["views"][k]["depth"].get<std::string>(), d.teachers[t].depths[k]);
    }
  }
  for (const auto* list : {&d.samples, &d.recon_samples})
    for (const auto& s : *list) {
      write_png(dir + "/images/" + s.id + "_input.png", s.input);
      if (s.style_id != "identity") write_png(dir + "/images/" + s.id + "_label.png", s.pseudo_label);
    }
  nlohmann::json out = m;
  out["hash"] = d.hash();
  write_file_atomic(dir + "/manifest.json", out.dump(1));
}

namespace {

Tensorf load_checked_png(const std::string& path, const std::string& hash) {
  Tensorf img = read_png(path);
  if (tensor_hash(img) != hash) throw IoError("content hash mismatch: " + path);
  return img;
}

}  // namespace

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = dir + "/manifest.json";
  if (!fs::exists(manifest_path)) throw IoError("dataset manifest not found: " + manifest_path);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt dataset manifest: " + std::string(e.what()));
  }
  Dataset d;
  try {
    if (m.value("format", "") != "triedit-dataset v1") throw IoError("unsupported dataset format in " + manifest_path);
    d.config = m.at("config").get<DatasetConfig>();
    d.scenes = m.at("scenes").get<std::vector<SyntheticScene>>();
    d.camera_set = m.at("camera_set").get<std::vector<CameraPose>>();
    for (const auto& [id, ej] : m.at("exemplars").items())
      d.exemplars[id] = load_checked_png(dir + "/" + ej.at("file").get<std::string>(), ej.at("hash").get<std::string>());
    for (const auto& tj : m.at("teachers")) {
      TeacherTargets t;
      t.t_gt = load_triplane(dir + "/" + tj.at("t_gt").get<std::string>());
      Fnv1a th;
      hash_tensor(th, t.t_gt.planes);
      if (th.hex() != tj.at("t_gt_hash").get<std::string>()) throw IoError("content hash mismatch: t_gt " + tj["t_gt"].dump());
      t.cameras = d.camera_set;
      for (const auto& vj : tj.at("views")) {
        t.images.push_back(load_checked_png(dir + "/" + vj.at("image").get<std::string>(), vj.at("image_hash").get<std::string>()));
        t.depths.push_back(load_depth(dir + "/" + vj.at("depth").get<std::string>()));
        if (tensor_hash(t.depths.back()) != vj.at("depth_hash").get<std::string>())
          throw IoError("content hash mismatch: " + vj["depth"].dump());
      }
      t.validate();
      d.teachers.push_back(std::move(t));
      d.teacher_scenes.push_back(tj.at("scene").get<int>());
      d.teacher_styles.push_back(tj.at("style").get<std::string>());
    }
    auto read_samples = [&](const nlohmann::json& arr, std::vector<EditSample>& out) {
      for (const auto& sj : arr) {
        EditSample s;
        s.id = sj.at("id").get<std::string>();
        s.scene_index = sj.at("scene").get<int>();
        s.scene_seed = sj.at("scene_seed").get<std::uint64_t>();
        s.style_id = sj.at("style").get<std::string>();
        s.pose = sj.at("pose").get<CameraPose>();
        s.teacher_index = sj.at("teacher").get<int>();
        require(s.teacher_index >= 0 && s.teacher_index < static_cast<int>(d.teachers.size()), "sample teacher index out of range");
        s.input = load_checked_png(dir + "/" + sj.at("input").get<std::string>(), sj.at("input_hash").get<std::string>());
        s.pseudo_label = s.style_id == "identity"
                             ? s.input
                             : load_checked_png(dir + "/" + sj.at("label").get<std::string>(), sj.at("label_hash").get<std::string>());
        const auto& pj = sj.at("prompt");
        if (pj.at("type") == "text")
          s.prompt = Prompt::from_text(pj.at("text").get<std::string>(), d.config.model.vocab_size);
        else
          s.prompt = Prompt::from_image(d.exemplars.at(pj.at("exemplar").get<std::string>()));
        out.push_back(std::move(s));
      }
    };
    read_samples(m.at("samples"), d.samples);
    read_samples(m.at("recon_samples"), d.recon_samples);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt dataset manifest: " + std::string(e.what()));
  } catch (const std::out_of_range& e) {
    throw IoError("corrupt dataset manifest: " + std::string(e.what()));
  }
  if (m.contains("hash") && m["hash"].get<std::string>() != d.hash())
    throw IoError("dataset manifest hash mismatch in " + manifest_path);
  return d;
}

}  // namespace triedit
