// SPDX-License-Identifier: Apache-2.0
//
// Camera convention (used everywhere in the project):
//   * right-handed world and camera frames;
//   * the camera looks down its local -z axis, +x is image right, +y is image up;
//   * pixel (row i, col j) has its center at (j + 0.5, i + 0.5) in pixel units;
//   * "front" of a scene is +z: a ring camera at azimuth 0 and elevation 0
//     sits on the +z axis and has an identity rotation.
#pragma once

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>
#include <vector>

#include "triedit/tensor.hpp"

namespace triedit {

struct CameraPose {
  Eigen::Matrix4d cam_to_world = Eigen::Matrix4d::Identity();
  double focal = 1.0;  // pixels
  double cx = 0.5;     // principal point, pixels
  double cy = 0.5;
  double near = 0.1;
  double far = 10.0;

  Eigen::Matrix3d rotation() const { return cam_to_world.topLeftCorner<3, 3>(); }
  Eigen::Vector3d center() const { return cam_to_world.topRightCorner<3, 1>(); }
  /// Unit viewing direction in world space (camera -z).
  Eigen::Vector3d forward() const { return -rotation().col(2); }

  /// Same extrinsics with intrinsics scaled for an image `factor` times larger.
  CameraPose resized(double factor) const;

  /// Throws ValidationError unless the pose satisfies its invariants.
  void validate() const;

  friend bool operator==(const CameraPose&, const CameraPose&) = default;
};

/// Per-pixel rays in world space, row-major [H, W, 3].
struct RayBundle {
  int height = 0;
  int width = 0;
  std::vector<double> origins;
  std::vector<double> directions;
  double t_near = 0;
  double t_far = 0;

  Eigen::Vector3d origin(int i, int j) const;
  Eigen::Vector3d direction(int i, int j) const;
};

RayBundle generate_rays(const CameraPose& pose, int height, int width);

/// Smallest scene-bounding near/far pair for a camera at `distance` from the
/// center of the cube [-extent, extent]^3, with a small margin.
std::pair<double, double> scene_near_far(double distance, double extent = 1.0);

/// Pinhole pose at `position` looking at `target` with world +y as up.
CameraPose look_at_pose(const Eigen::Vector3d& position, const Eigen::Vector3d& target, double focal, int image_size,
                        double extent = 1.0);

/// Focal length (pixels) giving a horizontal field of view of `fov_degrees`.
double focal_from_fov(double fov_degrees, int image_size);

struct OrbitSettings {
  double radius = 2.7;
  double fov_degrees = 30.0;
  int image_size = 64;
  double extent = 1.0;
};

/// Camera on a sphere around `look_at`; yaw rotates about +y starting at +z,
/// pitch raises the camera toward +y. Degrees.
CameraPose orbit_pose(double yaw_degrees, double pitch_degrees, const OrbitSettings& orbit = {},
                      const Eigen::Vector3d& look_at = Eigen::Vector3d::Zero());

/// n poses evenly spaced in azimuth at a fixed elevation, all aimed at look_at.
std::vector<CameraPose> sample_camera_ring(int n, double radius, double elevation_degrees,
                                           const Eigen::Vector3d& look_at = Eigen::Vector3d::Zero(),
                                           double azimuth_offset_degrees = 0.0, double fov_degrees = 30.0,
                                           int image_size = 64);

void to_json(nlohmann::json& j, const CameraPose& pose);
void from_json(const nlohmann::json& j, CameraPose& pose);

}  // namespace triedit
