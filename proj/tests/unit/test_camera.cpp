// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include "triedit/camera.hpp"

using namespace triedit;

namespace {

CameraPose identity_pose(double focal, double cx, double cy) {
  CameraPose p;
  p.focal = focal;
  p.cx = cx;
  p.cy = cy;
  return p;
}

CameraPose yawed_180(CameraPose p) {
  Eigen::Matrix3d r;
  r << -1, 0, 0, 0, 1, 0, 0, 0, -1;
  p.cam_to_world.topLeftCorner<3, 3>() = r;
  return p;
}

}  // namespace

TEST_CASE("identity pose: center-adjacent rays mirror about the optical axis") {
  auto rays = generate_rays(identity_pose(2, 1, 1), 2, 2);
  for (int i = 0; i < 2; ++i) {
    CHECK(rays.direction(i, 0).x() == doctest::Approx(-rays.direction(i, 1).x()));
    CHECK(rays.direction(i, 0).y() == doctest::Approx(rays.direction(i, 1).y()));
  }
  // (j + 0.5 - 1) / 2 = -0.25 for the left column, normalized by sqrt(0.25^2 * 2 + 1)
  const double n = std::sqrt(0.0625 * 2 + 1);
  CHECK(rays.direction(0, 0).x() == doctest::Approx(-0.25 / n));
  CHECK(rays.direction(0, 0).y() == doctest::Approx(0.25 / n));
  CHECK(rays.direction(0, 0).z() == doctest::Approx(-1.0 / n));
}

TEST_CASE("identity pose: all origins at zero, unit directions") {
  auto rays = generate_rays(identity_pose(3, 2.5, 1.5), 3, 5);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      CHECK(rays.origin(i, j).norm() == 0.0);
      CHECK(rays.direction(i, j).norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("180 degree yaw negates the optical-axis ray") {
  const CameraPose p = identity_pose(2, 1.5, 1.5);
  auto a = generate_rays(p, 3, 3), b = generate_rays(yawed_180(p), 3, 3);
  // rotation diag(-1, 1, -1) maps (0, 0, -1) to (0, 0, 1)
  CHECK((a.direction(1, 1) - Eigen::Vector3d(0, 0, -1)).norm() < 1e-12);
  CHECK((b.direction(1, 1) + a.direction(1, 1)).norm() < 1e-12);
}

TEST_CASE("invalid poses are rejected") {
  CameraPose p = identity_pose(2, 1, 1);
  p.cam_to_world(0, 1) = 0.3;
  CHECK_THROWS_AS(generate_rays(p, 2, 2), ValidationError);
  CameraPose mirrored = identity_pose(2, 1, 1);
  mirrored.cam_to_world(0, 0) = -1;
  CHECK_THROWS_AS(mirrored.validate(), ValidationError);
  CameraPose bad_row = identity_pose(2, 1, 1);
  bad_row.cam_to_world(3, 0) = 1e-9;
  CHECK_THROWS_AS(bad_row.validate(), ValidationError);
  CameraPose bad_range = identity_pose(2, 1, 1);
  bad_range.near = 3;
  bad_range.far = 2;
  CHECK_THROWS_AS(bad_range.validate(), ValidationError);
  CHECK_THROWS_AS(generate_rays(identity_pose(2, 1, 1), 0, 2), ValidationError);
}

TEST_CASE("generate_rays is deterministic and the center ray is the forward axis") {
  const CameraPose p = orbit_pose(23, -11);
  auto a = generate_rays(p, 64, 64), b = generate_rays(p, 64, 64);
  CHECK(a.directions == b.directions);
  CHECK(a.origins == b.origins);
  auto odd = generate_rays(orbit_pose(23, -11, {2.7, 30, 65, 1}), 65, 65);
  CHECK(odd.direction(32, 32).dot(orbit_pose(23, -11, {2.7, 30, 65, 1}).forward()) > 1 - 1e-6);
}

TEST_CASE("camera ring: even azimuths, orthonormal, aimed at look_at") {
  const Eigen::Vector3d target(0.1, -0.2, 0.05);
  auto ring = sample_camera_ring(4, 2.5, 0, target);
  REQUIRE(ring.size() == 4);
  const Eigen::Vector3d expected[4] = {{0, 0, 2.5}, {2.5, 0, 0}, {0, 0, -2.5}, {-2.5, 0, 0}};
  for (int k = 0; k < 4; ++k) {
    const auto& p = ring[k];
    CHECK(((p.center() - target) - expected[k]).norm() < 1e-12);
    const Eigen::Matrix3d r = p.rotation();
    CHECK((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-6);
    const Eigen::Vector3d to_target = (target - p.center()).normalized();
    CHECK(p.forward().dot(to_target) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_NOTHROW(p.validate());
  }
  auto single = sample_camera_ring(1, 3.0, 0, Eigen::Vector3d::Zero());
  CHECK((single[0].center() - Eigen::Vector3d(0, 0, 3)).norm() < 1e-12);
  CHECK((single[0].rotation() - Eigen::Matrix3d::Identity()).norm() < 1e-12);
  CHECK_THROWS_AS(sample_camera_ring(4, 0.0, 0), ValidationError);
  CHECK_THROWS_AS(sample_camera_ring(0, 1.0, 0), ValidationError);
}

TEST_CASE("camera ring shifted by 360/n is a permutation") {
  for (int n : {3, 5, 8}) {
    auto a = sample_camera_ring(n, 2.7, 12);
    auto b = sample_camera_ring(n, 2.7, 12, Eigen::Vector3d::Zero(), 360.0 / n);
    for (int k = 0; k < n; ++k) {
      const auto& shifted = b[k];
      const auto& orig = a[(k + 1) % n];
      CHECK((shifted.cam_to_world - orig.cam_to_world).cwiseAbs().maxCoeff() < 1e-6);
    }
  }
}

TEST_CASE("near/far bound the scene cube") {
  const auto p = orbit_pose(40, 20);
  for (int sx : {-1, 1})
    for (int sy : {-1, 1})
      for (int sz : {-1, 1}) {
        const double d = (Eigen::Vector3d(sx, sy, sz) - p.center()).norm();
        CHECK(d > p.near);
        CHECK(d < p.far);
      }
}

TEST_CASE("pose JSON round trip and validation") {
  const CameraPose p = orbit_pose(-30, 10);
  nlohmann::json j = p;
  CHECK(j.at("cam_to_world").size() == 4);
  CameraPose q = j.get<CameraPose>();
  CHECK(q == p);
  j["cam_to_world"][0][0] = 2.0;
  CHECK_THROWS_AS(j.get<CameraPose>(), ValidationError);
  nlohmann::json missing = {{"focal", 1.0}};
  CHECK_THROWS_AS(missing.get<CameraPose>(), ValidationError);
}
