// SPDX-License-Identifier: Apache-2.0
//
// Procedural stand-in world: soft-occupancy primitive scenes, a pointwise
// linear colour-edit oracle, an analytic ray-marching teacher and the
// paired dataset built from them.
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "triedit/losses.hpp"

namespace triedit {

/// Pointwise colour map c -> clamp(M c, 0, 1) with
/// M = duotone * gain * saturation * hue_rotation. Every factor is linear in
/// the colour, so the edit commutes with alpha compositing over black.
struct EditStyle {
  std::string style_id = "identity";
  double hue_degrees = 0;  // rotation about the gray axis
  double saturation = 1;   // scale of the chroma component
  double value_offset = 0; // brightness gain: colours are multiplied by 1 + value_offset
  std::optional<Eigen::Vector3d> duotone;  // tint colour in [0, 1]^3
  double duotone_strength = 0;             // k: (1 - k) c + k * lum(c) * tint

  Eigen::Matrix3d matrix() const;
  Eigen::Vector3d apply(const Eigen::Vector3d& rgb) const;
  bool is_identity() const;
  /// Text instruction carrying the style token.
  std::string instruction() const;
  void validate() const;

  static EditStyle identity() { return {}; }
};

void to_json(nlohmann::json& j, const EditStyle& s);
void from_json(const nlohmann::json& j, EditStyle& s);

/// Twenty named styles. For scene colours (mean in [0.3, 0.55], chroma at
/// most 0.2) none of them reaches the clamp.
const std::vector<EditStyle>& style_bank();
/// Looks a style up in the bank; "identity" is accepted too.
EditStyle style_by_id(const std::string& id);

/// Applies the style to every pixel of an [H, W, 3] image.
Tensorf apply_edit(const Tensorf& img, const EditStyle& style);

struct Primitive {
  enum class Kind { Ellipsoid, Box };
  Kind kind = Kind::Ellipsoid;
  std::string role;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d radii = Eigen::Vector3d::Constant(0.5);  // semi-axes or half-extents
  double sigma0 = 30;
  Eigen::Vector3d rgb = Eigen::Vector3d::Constant(0.5);

  /// Normalised distance: 1 on the surface, < 1 inside.
  double normalized_distance(const Eigen::Vector3d& p) const;
};

struct SyntheticScene {
  std::uint64_t seed = 0;
  std::vector<Primitive> primitives;  // primitives[0] is the base (head); later ones paint over it
  EditStyle style;                    // edit state applied to the base colours
  double softness = 0.03;             // width of the occupancy transition, world units

  /// Occupancy o_k = sigmoid((1 - d_k) * min(radii_k) / softness);
  /// density = max_k sigma0_k * o_k; colour = style(lerp chain of base colours by o_k).
  void field(const double* p, double& density, double* rgb) const;
  FieldFunction field_function() const;
  SyntheticScene edited(const EditStyle& s) const;
  void validate() const;
  /// FNV-1a over the geometric and colour parameters.
  std::uint64_t parameter_hash() const;
};

void to_json(nlohmann::json& j, const SyntheticScene& s);
void from_json(const nlohmann::json& j, SyntheticScene& s);

/// Head-like composition: one large ellipsoid plus 1-4 features.
SyntheticScene generate_scene(std::uint64_t seed);
SyntheticScene sphere_scene(double radius, double sigma0, const Eigen::Vector3d& rgb, double softness = 0.002);

struct AnalyticRender {
  Tensorf rgb;    // [h, w, 3]
  Tensorf depth;  // [h, w]
  Tensorf acc;    // [h, w]
};

/// Double-precision ray march with `samples` midpoint bins over [near, far].
AnalyticRender render_scene(const SyntheticScene& scene, const CameraPose& pose, int height, int width,
                            int samples = 192);

/// Teacher triplane: the scene field fitted with the given decoder.
Triplane<float> fit_triplane_to_scene(const SyntheticScene& scene, const DecoderMLP<float>& decoder,
                                      const FitOptions& options);

struct TeacherOptions {
  int render_size = 32;
  int march_samples = 192;
  FitOptions fit;
};

/// Cameras carry intrinsics for `options.render_size`.
TeacherTargets teacher_infer(const SyntheticScene& scene_after_edit, const std::vector<CameraPose>& cameras,
                             const DecoderMLP<float>& decoder, const TeacherOptions& options);

enum class PromptMode { Text, Image, Mixed };

struct DatasetConfig {
  int num_scenes = 4;
  std::vector<EditStyle> styles;
  int cameras_per_scene = 2;
  std::string camera_set = "front_arc";  // or "ring"
  int camera_set_size = 4;
  double max_yaw = 30;    // input poses are drawn uniformly within +-max_yaw, +-max_pitch
  double max_pitch = 15;
  double radius = 2.7;
  double fov_degrees = 30;
  int march_samples = 192;
  PromptMode prompt_mode = PromptMode::Mixed;
  FitOptions fit;  // channels/resolution/extent are taken from `model`
  ModelConfig model;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

struct EditSample {
  std::string id;
  int scene_index = 0;
  std::uint64_t scene_seed = 0;
  std::string style_id;
  Tensorf input;         // I, 8-bit quantised
  CameraPose pose;       // input-view pose at image_size intrinsics
  Prompt prompt;
  Tensorf pseudo_label;  // I_gt, 8-bit quantised
  int teacher_index = 0;
};

struct Dataset {
  DatasetConfig config;
  std::vector<SyntheticScene> scenes;  // unedited
  std::vector<CameraPose> camera_set;  // render_size intrinsics
  std::vector<TeacherTargets> teachers;
  std::vector<std::string> teacher_styles;  // style id per teacher
  std::vector<int> teacher_scenes;          // scene index per teacher
  std::vector<EditSample> samples;          // edited pairs
  std::vector<EditSample> recon_samples;    // identity pairs used by reconstruction pretraining
  std::map<std::string, Tensorf> exemplars; // style id -> edited image of a scene outside the dataset

  const TeacherTargets& teacher(const EditSample& s) const { return teachers.at(s.teacher_index); }
  /// FNV-1a of the manifest (which records per-file content hashes).
  std::string hash() const;
};

/// Input-view camera set C at render resolution.
std::vector<CameraPose> make_camera_set(const DatasetConfig& config);
Dataset build_dataset(const DatasetConfig& config);
Dataset build_dataset(int num_scenes, const std::vector<EditStyle>& styles, int cameras_per_scene, std::uint64_t seed);

nlohmann::json dataset_manifest(const Dataset& d);
/// Directory layout: manifest.json, images/, teachers/, exemplars/.
void save_dataset(const Dataset& d, const std::string& dir);
/// IoError when the directory or a referenced file is missing.
Dataset load_dataset(const std::string& dir);

}  // namespace triedit
