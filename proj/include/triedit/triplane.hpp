// SPDX-License-Identifier: Apache-2.0
//
// Triplane neural field: three axis-aligned feature planes (XY, XZ, YZ).
// A point's feature is the SUM of its bilinear samples on the three planes.
//
// Public indexing follows [plane, channel, row, col]. Internally the planes
// are stored channel-last ([plane, row, col, channel]) so that one bilinear
// tap reads C contiguous values. Plane axes: XY -> (col=x, row=y),
// XZ -> (col=x, row=z), YZ -> (col=y, row=z). Grid nodes sit on the cube
// boundary: node 0 at -extent, node R-1 at +extent. Points outside the cube
// are clamped to the border.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>

#include "triedit/autodiff.hpp"

namespace triedit {

template <typename Real>
struct Triplane {
  Tensor<Real> planes;  // [3, R, R, C] channel-last
  Real extent = Real(1);

  static Triplane zeros(int channels, int resolution, Real extent = Real(1));
  /// Wraps a channel-last [3, R, R, C] tensor.
  static Triplane from_channel_last(Tensor<Real> planes, Real extent = Real(1));

  int channels() const { return planes.dim(3); }
  int resolution() const { return planes.dim(1); }

  Real& at(int plane, int channel, int row, int col) { return planes[index(plane, channel, row, col)]; }
  Real at(int plane, int channel, int row, int col) const { return planes[index(plane, channel, row, col)]; }

  void validate() const;

  template <typename To>
  Triplane<To> cast() const {
    return Triplane<To>{planes.template cast<To>(), static_cast<To>(extent)};
  }

 private:
  std::size_t index(int plane, int channel, int row, int col) const {
    const int r = resolution(), c = channels();
    return ((static_cast<std::size_t>(plane) * r + row) * r + col) * c + channel;
  }
};

/// Shallow density/colour decoder: features -> hidden (softplus) -> [1 + Cf].
template <typename Real>
struct DecoderMLP {
  ad::Var<Real> w1, b1, w2, b2;

  int in_dim() const { return w1.shape()[0]; }
  int hidden_dim() const { return w1.shape()[1]; }
  /// Number of colour-feature channels (first three are RGB).
  int color_dim() const { return w2.shape()[1] - 1; }

  /// Xavier-uniform weights, zero biases, deterministic in `seed`.
  static DecoderMLP init(int in_dim, int hidden, int color_dim, std::uint64_t seed, bool requires_grad = false);
};

template <typename Real>
struct FieldSamples {
  Tensor<Real> density;  // [N]
  Tensor<Real> color;    // [N, Cf], sigmoid-activated
};

/// Differentiable triplane lookup. `points` is [N, 3] row-major.
template <typename Real>
ad::Var<Real> sample_triplane(const ad::Var<Real>& planes, Real extent, const std::vector<Real>& points);

template <typename Real>
Tensor<Real> sample_triplane(const Triplane<Real>& t, const Tensor<Real>& points);

/// Raw decoder output [N, 1 + Cf] before activation.
template <typename Real>
ad::Var<Real> decoder_forward(const ad::Var<Real>& features, const DecoderMLP<Real>& decoder);

/// Column 0 -> softplus (density), remaining columns -> sigmoid.
template <typename Real>
ad::Var<Real> activate_field(const ad::Var<Real>& raw);

template <typename Real>
FieldSamples<Real> decode_field(const Tensor<Real>& features, const DecoderMLP<Real>& decoder);

/// Analytic scene field: fills density and rgb (3 values) at point p.
using FieldFunction = std::function<void(const double* p, double& density, double* rgb)>;

struct FitOptions {
  int channels = 16;
  int resolution = 32;
  double extent = 1.0;
  int grid = 40;           // fixed fitting grid is grid^3 cell-centred points
  int iterations = 400;
  int batch = 4096;
  double lr = 0.05;
  double color_weight = 4.0;
  double min_raw_density = -9.0;  // softplus^-1 target floor for empty space
  std::uint64_t seed = 0;
};

/// Least-squares fit of triplane planes (decoder held fixed) so that the
/// decoded field reproduces `field` on a fixed point grid.
Triplane<float> fit_triplane_to_field(const FieldFunction& field, const DecoderMLP<float>& decoder, const FitOptions& options);

/// Binary format: text line "TRIPLANE v1 C R extent\n" followed by
/// little-endian float32 values in [3, C, R, R] order.
void write_triplane(std::ostream& os, const Triplane<float>& t);
Triplane<float> read_triplane(std::istream& is);
void save_triplane(const std::string& path, const Triplane<float>& t);
Triplane<float> load_triplane(const std::string& path);

}  // namespace triedit
