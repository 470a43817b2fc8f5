// SPDX-License-Identifier: Apache-2.0
#include "triedit/camera.hpp"

#include <Eigen/Geometry>
#include <cmath>
#include <nlohmann/json.hpp>

#include "triedit/error.hpp"

namespace triedit {

namespace {
constexpr double kPi = 3.14159265358979323846;
double deg2rad(double d) { return d * kPi / 180.0; }
}  // namespace

CameraPose CameraPose::resized(double factor) const {
  CameraPose p = *this;
  p.focal *= factor;
  p.cx *= factor;
  p.cy *= factor;
  return p;
}

void CameraPose::validate() const {
  require(cam_to_world.allFinite(), "camera pose contains non-finite values");
  const Eigen::Matrix3d r = rotation();
  const double residual = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  require(residual < 1e-6, "camera rotation is not orthonormal (residual " + std::to_string(residual) + ")");
  require(std::abs(r.determinant() - 1.0) < 1e-6, "camera rotation must have determinant +1");
  require(cam_to_world(3, 0) == 0.0 && cam_to_world(3, 1) == 0.0 && cam_to_world(3, 2) == 0.0 && cam_to_world(3, 3) == 1.0,
          "camera matrix bottom row must be (0,0,0,1)");
  require(std::isfinite(focal) && focal > 0, "camera focal length must be positive");
  require(near > 0 && far > near, "camera requires 0 < near < far");
}

Eigen::Vector3d RayBundle::origin(int i, int j) const {
  const std::size_t o = (static_cast<std::size_t>(i) * width + j) * 3;
  return {origins[o], origins[o + 1], origins[o + 2]};
}

Eigen::Vector3d RayBundle::direction(int i, int j) const {
  const std::size_t o = (static_cast<std::size_t>(i) * width + j) * 3;
  return {directions[o], directions[o + 1], directions[o + 2]};
}

RayBundle generate_rays(const CameraPose& pose, int height, int width) {
  require(height >= 1 && width >= 1, "generate_rays: image size must be positive");
  pose.validate();
  RayBundle rays;
  rays.height = height;
  rays.width = width;
  rays.t_near = pose.near;
  rays.t_far = pose.far;
  const std::size_t n = static_cast<std::size_t>(height) * width;
  rays.origins.resize(n * 3);
  rays.directions.resize(n * 3);
  const Eigen::Matrix3d r = pose.rotation();
  const Eigen::Vector3d c = pose.center();
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) {
      const Eigen::Vector3d d_cam((j + 0.5 - pose.cx) / pose.focal, -(i + 0.5 - pose.cy) / pose.focal, -1.0);
      const Eigen::Vector3d d = (r * d_cam).normalized();
      const std::size_t o = (static_cast<std::size_t>(i) * width + j) * 3;
      for (int k = 0; k < 3; ++k) {
        rays.origins[o + k] = c[k];
        rays.directions[o + k] = d[k];
      }
    }
  return rays;
}

std::pair<double, double> scene_near_far(double distance, double extent) {
  const double half_diag = std::sqrt(3.0) * extent;
  const double margin = 0.05 * extent;
  return {std::max(1e-3, distance - half_diag - margin), distance + half_diag + margin};
}

double focal_from_fov(double fov_degrees, int image_size) {
  require(fov_degrees > 0 && fov_degrees < 180, "field of view must be in (0, 180) degrees");
  return 0.5 * image_size / std::tan(0.5 * deg2rad(fov_degrees));
}

CameraPose look_at_pose(const Eigen::Vector3d& position, const Eigen::Vector3d& target, double focal, int image_size,
                        double extent) {
  const Eigen::Vector3d fwd = (target - position).normalized();
  const Eigen::Vector3d z = -fwd;
  Eigen::Vector3d up(0, 1, 0);
  Eigen::Vector3d x = up.cross(z);
  require(x.norm() > 1e-9, "look_at_pose: view direction is parallel to the up vector");
  x.normalize();
  const Eigen::Vector3d y = z.cross(x);
  CameraPose p;
  p.cam_to_world.setIdentity();
  p.cam_to_world.block<3, 1>(0, 0) = x;
  p.cam_to_world.block<3, 1>(0, 1) = y;
  p.cam_to_world.block<3, 1>(0, 2) = z;
  p.cam_to_world.block<3, 1>(0, 3) = position;
  p.focal = focal;
  p.cx = p.cy = 0.5 * image_size;
  const auto [n, f] = scene_near_far(position.norm(), extent);
  p.near = n;
  p.far = f;
  return p;
}

CameraPose orbit_pose(double yaw_degrees, double pitch_degrees, const OrbitSettings& orbit, const Eigen::Vector3d& look_at) {
  require(orbit.radius > 0, "orbit radius must be positive");
  require(std::abs(pitch_degrees) < 89.0, "orbit pitch must be within (-89, 89) degrees");
  const double yaw = deg2rad(yaw_degrees), pitch = deg2rad(pitch_degrees);
  const Eigen::Vector3d offset(orbit.radius * std::cos(pitch) * std::sin(yaw), orbit.radius * std::sin(pitch),
                               orbit.radius * std::cos(pitch) * std::cos(yaw));
  return look_at_pose(look_at + offset, look_at, focal_from_fov(orbit.fov_degrees, orbit.image_size), orbit.image_size,
                      orbit.extent);
}

std::vector<CameraPose> sample_camera_ring(int n, double radius, double elevation_degrees, const Eigen::Vector3d& look_at,
                                           double azimuth_offset_degrees, double fov_degrees, int image_size) {
  require(n >= 1, "sample_camera_ring: n must be >= 1");
  require(radius > 0, "sample_camera_ring: radius must be positive");
  OrbitSettings orbit;
  orbit.radius = radius;
  orbit.fov_degrees = fov_degrees;
  orbit.image_size = image_size;
  std::vector<CameraPose> poses;
  poses.reserve(n);
  for (int k = 0; k < n; ++k)
    poses.push_back(orbit_pose(azimuth_offset_degrees + 360.0 * k / n, elevation_degrees, orbit, look_at));
  return poses;
}

void to_json(nlohmann::json& j, const CameraPose& pose) {
  nlohmann::json m = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < 4; ++c) row.push_back(pose.cam_to_world(r, c));
    m.push_back(row);
  }
  j = nlohmann::json{{"cam_to_world", m}, {"focal", pose.focal}, {"cx", pose.cx}, {"cy", pose.cy},
                     {"near", pose.near}, {"far", pose.far}};
}

void from_json(const nlohmann::json& j, CameraPose& pose) {
  try {
    const auto& m = j.at("cam_to_world");
    require(m.is_array() && m.size() == 4, "cam_to_world must be a 4x4 array");
    for (int r = 0; r < 4; ++r) {
      require(m[r].is_array() && m[r].size() == 4, "cam_to_world must be a 4x4 array");
      for (int c = 0; c < 4; ++c) pose.cam_to_world(r, c) = m[r][c].get<double>();
    }
    pose.focal = j.at("focal").get<double>();
    pose.cx = j.at("cx").get<double>();
    pose.cy = j.at("cy").get<double>();
    pose.near = j.at("near").get<double>();
    pose.far = j.at("far").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid pose JSON: ") + e.what());
  }
  pose.validate();
}

}  // namespace triedit
