// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "triedit/camera.hpp"
#include "triedit/renderer.hpp"
#include "triedit/triplane.hpp"

namespace triedit::testing {

/// Opaque centred sphere with constant colour.
inline FieldFunction sphere_field(double radius, double sigma = 40.0, double gray = 0.7) {
  return [=](const double* p, double& density, double* rgb) {
    const double r = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    density = r < radius ? sigma : 0.0;
    rgb[0] = rgb[1] = rgb[2] = r < radius ? gray : 0.0;
  };
}

/// Does the camera ray through pixel (i, j) hit the sphere of the given radius at the origin?
inline bool ray_hits_sphere(const RayBundle& rays, int i, int j, double radius) {
  const Eigen::Vector3d o = rays.origin(i, j), d = rays.direction(i, j);
  const double b = o.dot(d);
  const double c = o.squaredNorm() - radius * radius;
  return b * b - c >= 0 && -b > 0;
}

/// Decoder whose output ignores features: density and colour come from b2.
template <typename Real>
DecoderMLP<Real> constant_decoder(int channels, Real raw_density, Real r, Real g, Real b) {
  auto d = DecoderMLP<Real>::init(channels, 4, 3, 0);
  d.w1.mutable_value().fill(0);
  d.w2.mutable_value().fill(0);
  d.b2.mutable_value() = Tensor<Real>({4}, std::vector<Real>{raw_density, r, g, b});
  return d;
}

}  // namespace triedit::testing
