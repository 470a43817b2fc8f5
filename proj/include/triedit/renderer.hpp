// SPDX-License-Identifier: Apache-2.0
//
// Emission-absorption volume rendering of a triplane field plus the 2x
// upsampler that produces the final image. Background is black.
#pragma once

#include <cstdint>

#include "triedit/camera.hpp"
#include "triedit/triplane.hpp"

namespace triedit {

/// Pixels whose accumulated weight is at or below this report depth 0.
inline constexpr double kAccEpsilon = 1e-3;

enum class SamplingMode { Midpoint, Stratified };

struct RenderSettings {
  int samples_per_ray = 32;
  SamplingMode mode = SamplingMode::Midpoint;
  std::uint64_t seed = 0;  // jitter seed, used in Stratified mode only
};

/// Residual upsampler: nearest-neighbour base image corrected by a small
/// conv branch computed from the low-resolution features. The last conv is
/// zero-initialised, so a fresh upsampler is a plain nearest-neighbour upscale.
template <typename Real>
struct Upsampler {
  ad::Var<Real> w1, b1, w2, b2;
  int factor = 2;

  int in_channels() const { return w1.shape()[2]; }
  static Upsampler init(int in_channels, int hidden, int factor, std::uint64_t seed, bool requires_grad = false);
};

template <typename Real>
struct RenderVars {
  ad::Var<Real> rgb_low;    // [h, w, 3]
  ad::Var<Real> features;   // [h, w, Cf], first three channels equal rgb_low
  ad::Var<Real> depth;      // [h, w]
  ad::Var<Real> acc;        // [h, w]
  ad::Var<Real> rgb_final;  // [H, W, 3], only set by render_full
};

/// Per-ray compositing weights for densities sampled with bin width `delta`.
/// Returns w_i = T_i * (1 - exp(-sigma_i * delta)); if `transmittance` is non-null
/// it receives T_i = exp(-delta * sum_{j<i} sigma_j).
template <typename Real>
std::vector<Real> composite_weights(const std::vector<Real>& sigma, Real delta, std::vector<Real>* transmittance = nullptr);

template <typename Real>
RenderVars<Real> volume_render(const ad::Var<Real>& planes, Real extent, const DecoderMLP<Real>& decoder,
                               const CameraPose& pose, int height, int width, const RenderSettings& settings);

template <typename Real>
ad::Var<Real> upsample(const ad::Var<Real>& rgb_low, const ad::Var<Real>& features, const Upsampler<Real>& upsampler);

/// Renders at (height / factor, width / factor) and upsamples to (height, width).
/// `pose` carries intrinsics for the final resolution.
template <typename Real>
RenderVars<Real> render_full(const ad::Var<Real>& planes, Real extent, const DecoderMLP<Real>& decoder,
                             const Upsampler<Real>& upsampler, const CameraPose& pose, int height, int width,
                             const RenderSettings& settings);

struct RenderOutput {
  Tensorf rgb_low;    // [h, w, 3]
  Tensorf rgb_final;  // [H, W, 3]; empty for volume_render
  Tensorf depth;      // [h, w]
  Tensorf acc;        // [h, w]
};

RenderOutput volume_render(const Triplane<float>& t, const DecoderMLP<float>& decoder, const CameraPose& pose, int height,
                           int width, const RenderSettings& settings = {});
Tensorf upsample(const Tensorf& rgb_low, const Tensorf& features, const Upsampler<float>& upsampler, int out_height,
                 int out_width);
RenderOutput render_full(const Triplane<float>& t, const DecoderMLP<float>& decoder, const Upsampler<float>& upsampler,
                         const CameraPose& pose, int height, int width, const RenderSettings& settings = {});

/// Depth map format: text line "DEPTH v1 h w\n" followed by h*w little-endian float32.
void save_depth(const std::string& path, const Tensorf& depth);
Tensorf load_depth(const std::string& path);
std::string encode_depth(const Tensorf& depth);
Tensorf decode_depth(const std::string& bytes);

}  // namespace triedit
