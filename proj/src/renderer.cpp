// SPDX-License-Identifier: Apache-2.0
#include "triedit/renderer.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace triedit {

template <typename Real>
Upsampler<Real> Upsampler<Real>::init(int in_channels, int hidden, int factor, std::uint64_t seed, bool requires_grad) {
  require(in_channels >= 3 && hidden >= 1, "upsampler dims must be positive with >= 3 input channels");
  require(factor >= 1, "upsampler factor must be >= 1");
  std::mt19937_64 rng(seed);
  Tensor<Real> w1({3, 3, in_channels, hidden});
  const double bound = std::sqrt(6.0 / (9.0 * (in_channels + hidden)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : w1.storage()) v = static_cast<Real>(dist(rng));
  Upsampler u;
  u.w1 = ad::Var<Real>::leaf(std::move(w1), requires_grad);
  u.b1 = ad::Var<Real>::leaf(Tensor<Real>({hidden}), requires_grad);
  u.w2 = ad::Var<Real>::leaf(Tensor<Real>({3, 3, hidden, 3}), requires_grad);
  u.b2 = ad::Var<Real>::leaf(Tensor<Real>({3}), requires_grad);
  u.factor = factor;
  return u;
}

template <typename Real>
std::vector<Real> composite_weights(const std::vector<Real>& sigma, Real delta, std::vector<Real>* transmittance) {
  std::vector<Real> w(sigma.size());
  if (transmittance) transmittance->resize(sigma.size());
  Real log_t = 0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    const Real t = std::exp(log_t);
    if (transmittance) (*transmittance)[i] = t;
    w[i] = t * -std::expm1(-sigma[i] * delta);
    log_t -= sigma[i] * delta;
  }
  return w;
}

namespace {

// Composites activated samples [rays*S, 1+Cf] into [rays, Cf+2] = (features, depth, acc).
template <typename Real>
ad::Var<Real> composite(const ad::Var<Real>& act, std::vector<Real> tvals, int rays, int samples, Real delta) {
  const int cols = act.shape()[1];
  const int cf = cols - 1;
  Tensor<Real> out({rays, cf + 2});
  const Real* av = act.value().data();
  for (int r = 0; r < rays; ++r) {
    Real* o = out.data() + static_cast<std::size_t>(r) * (cf + 2);
    Real log_t = 0, acc = 0, draw = 0;
    for (int i = 0; i < samples; ++i) {
      const std::size_t s = static_cast<std::size_t>(r) * samples + i;
      const Real* a = av + s * cols;
      const Real w = std::exp(log_t) * -std::expm1(-a[0] * delta);
      log_t -= a[0] * delta;
      for (int c = 0; c < cf; ++c) o[c] += w * a[1 + c];
      acc += w;
      draw += w * tvals[s];
    }
    o[cf] = acc > Real(kAccEpsilon) ? draw / acc : Real(0);
    o[cf + 1] = acc;
  }
  return ad::make_op<Real>(
      std::move(out), {act}, [rays, samples, cols, cf, delta, tvals = std::move(tvals)](ad::Node<Real>& nd) {
        const Real* av = nd.inputs[0]->value.data();
        Real* ga = nd.inputs[0]->grad_buffer().data();
        std::vector<Real> w(samples), tnext(samples), gk(samples);
        for (int r = 0; r < rays; ++r) {
          const Real* go = nd.grad.data() + static_cast<std::size_t>(r) * (cf + 2);
          const Real* o = nd.value.data() + static_cast<std::size_t>(r) * (cf + 2);
          const std::size_t base = static_cast<std::size_t>(r) * samples;
          Real log_t = 0, draw = 0;
          for (int i = 0; i < samples; ++i) {
            const Real sig = av[(base + i) * cols];
            w[i] = std::exp(log_t) * -std::expm1(-sig * delta);
            log_t -= sig * delta;
            tnext[i] = std::exp(log_t);
            draw += w[i] * tvals[base + i];
          }
          const Real acc = o[cf + 1];
          Real g_draw = 0, g_acc = go[cf + 1];
          if (acc > Real(kAccEpsilon)) {
            g_draw = go[cf] / acc;
            g_acc -= go[cf] * draw / (acc * acc);
          }
          for (int i = 0; i < samples; ++i) {
            const Real* a = av + (base + i) * cols;
            Real g = g_acc + g_draw * tvals[base + i];
            for (int c = 0; c < cf; ++c) g += go[c] * a[1 + c];
            gk[i] = g;
          }
          Real suffix = 0;  // sum_{k>i} w_k G_k
          for (int i = samples - 1; i >= 0; --i) {
            Real* g = ga + (base + i) * cols;
            g[0] += delta * (tnext[i] * gk[i] - suffix);
            suffix += w[i] * gk[i];
            for (int c = 0; c < cf; ++c) g[1 + c] += w[i] * go[c];
          }
        }
      });
}

template <typename Real>
ad::Var<Real> take_columns(const ad::Var<Real>& packed, int rays, int first, int count, Shape out_shape) {
  const int cols = packed.shape()[1];
  std::vector<int> idx(static_cast<std::size_t>(rays) * count);
  for (int r = 0; r < rays; ++r)
    for (int c = 0; c < count; ++c) idx[static_cast<std::size_t>(r) * count + c] = r * cols + first + c;
  return ad::gather(packed, std::move(idx), std::move(out_shape));
}

}  // namespace

template <typename Real>
RenderVars<Real> volume_render(const ad::Var<Real>& planes, Real extent, const DecoderMLP<Real>& decoder,
                               const CameraPose& pose, int height, int width, const RenderSettings& settings) {
  require(settings.samples_per_ray >= 2, "volume_render: samples_per_ray must be >= 2");
  const RayBundle rays = generate_rays(pose, height, width);
  const int n_rays = height * width;
  const int s = settings.samples_per_ray;
  const double delta = (rays.t_far - rays.t_near) / s;
  std::vector<Real> tvals(static_cast<std::size_t>(n_rays) * s);
  std::vector<Real> points(tvals.size() * 3);
  std::mt19937_64 rng(settings.seed);
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  for (int r = 0; r < n_rays; ++r) {
    const double* o = rays.origins.data() + 3 * static_cast<std::size_t>(r);
    const double* d = rays.directions.data() + 3 * static_cast<std::size_t>(r);
    for (int i = 0; i < s; ++i) {
      const double u = settings.mode == SamplingMode::Stratified ? jitter(rng) : 0.5;
      const double t = rays.t_near + (i + u) * delta;
      const std::size_t k = static_cast<std::size_t>(r) * s + i;
      tvals[k] = static_cast<Real>(t);
      for (int c = 0; c < 3; ++c) points[3 * k + c] = static_cast<Real>(o[c] + t * d[c]);
    }
  }
  auto act = activate_field(decoder_forward(sample_triplane(planes, extent, points), decoder));
  const int cf = act.shape()[1] - 1;
  auto packed = composite(act, std::move(tvals), n_rays, s, static_cast<Real>(delta));
  RenderVars<Real> out;
  out.rgb_low = take_columns(packed, n_rays, 0, 3, {height, width, 3});
  out.features = take_columns(packed, n_rays, 0, cf, {height, width, cf});
  out.depth = take_columns(packed, n_rays, cf, 1, {height, width});
  out.acc = take_columns(packed, n_rays, cf + 1, 1, {height, width});
  return out;
}

template <typename Real>
ad::Var<Real> upsample(const ad::Var<Real>& rgb_low, const ad::Var<Real>& features, const Upsampler<Real>& ups) {
  require(rgb_low.shape().size() == 3 && rgb_low.shape()[2] == 3, "upsample: rgb_low must be [h,w,3]");
  require(features.shape().size() == 3 && features.shape()[0] == rgb_low.shape()[0] &&
              features.shape()[1] == rgb_low.shape()[1],
          "upsample: feature map must match rgb_low spatially");
  require(features.shape()[2] == ups.in_channels(), "upsample: feature channels do not match upsampler");
  constexpr Real kClampEps = Real(1e-7);
  auto base = ad::logit_clamped(ad::upsample_nearest(rgb_low, ups.factor), kClampEps);
  auto hidden = ad::silu(ad::conv2d(features, ups.w1, ups.b1, 1, 1));
  auto residual = ad::conv2d(ad::upsample_nearest(hidden, ups.factor), ups.w2, ups.b2, 1, 1);
  return ad::sigmoid(ad::add(base, residual));
}

template <typename Real>
RenderVars<Real> render_full(const ad::Var<Real>& planes, Real extent, const DecoderMLP<Real>& decoder,
                             const Upsampler<Real>& upsampler, const CameraPose& pose, int height, int width,
                             const RenderSettings& settings) {
  const int k = upsampler.factor;
  require(height % k == 0 && width % k == 0, "render_full: output size must be a multiple of the upsampling factor");
  auto out = volume_render(planes, extent, decoder, pose.resized(1.0 / k), height / k, width / k, settings);
  out.rgb_final = upsample(out.rgb_low, out.features, upsampler);
  return out;
}

RenderOutput volume_render(const Triplane<float>& t, const DecoderMLP<float>& decoder, const CameraPose& pose, int height,
                           int width, const RenderSettings& settings) {
  t.validate();
  ad::NoGradGuard no_grad;
  auto r = volume_render(ad::Var<float>::constant(t.planes), t.extent, decoder, pose, height, width, settings);
  return RenderOutput{r.rgb_low.value(), Tensorf(), r.depth.value(), r.acc.value()};
}

Tensorf upsample(const Tensorf& rgb_low, const Tensorf& features, const Upsampler<float>& upsampler, int out_height,
                 int out_width) {
  require(rgb_low.rank() == 3, "upsample: rgb_low must be [h,w,3]");
  require(out_height == upsampler.factor * rgb_low.dim(0) && out_width == upsampler.factor * rgb_low.dim(1),
          "upsample: output size must be an integer multiple (the upsampler factor) of the input size");
  ad::NoGradGuard no_grad;
  return upsample(ad::Var<float>::constant(rgb_low), ad::Var<float>::constant(features), upsampler).value();
}

RenderOutput render_full(const Triplane<float>& t, const DecoderMLP<float>& decoder, const Upsampler<float>& upsampler,
                         const CameraPose& pose, int height, int width, const RenderSettings& settings) {
  t.validate();
  ad::NoGradGuard no_grad;
  auto r = render_full(ad::Var<float>::constant(t.planes), t.extent, decoder, upsampler, pose, height, width, settings);
  return RenderOutput{r.rgb_low.value(), r.rgb_final.value(), r.depth.value(), r.acc.value()};
}

// --------------------------------------------------------------------------

std::string encode_depth(const Tensorf& depth) {
  require(depth.rank() == 2, "depth map must be [h,w]");
  std::ostringstream os;
  os << "DEPTH v1 " << depth.dim(0) << ' ' << depth.dim(1) << '\n';
  for (float f : depth.storage()) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    const char b[4] = {char(u & 0xff), char((u >> 8) & 0xff), char((u >> 16) & 0xff), char((u >> 24) & 0xff)};
    os.write(b, 4);
  }
  return os.str();
}

Tensorf decode_depth(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw IoError("missing depth header");
  std::istringstream hs(bytes.substr(0, nl));
  std::string magic, version;
  int h = 0, w = 0;
  hs >> magic >> version >> h >> w;
  if (!hs || magic != "DEPTH" || version != "v1" || h < 1 || w < 1) throw IoError("bad depth header");
  const std::size_t n = static_cast<std::size_t>(h) * w;
  if (bytes.size() - nl - 1 != n * 4) throw IoError("depth payload size mismatch");
  Tensorf d({h, w});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + nl + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t u = p[4 * i] | (p[4 * i + 1] << 8) | (p[4 * i + 2] << 16) | (static_cast<std::uint32_t>(p[4 * i + 3]) << 24);
    d[i] = std::bit_cast<float>(u);
  }
  return d;
}

void save_depth(const std::string& path, const Tensorf& depth) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  const std::string bytes = encode_depth(depth);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensorf load_depth(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_depth(ss.str());
}

#define TRIEDIT_INSTANTIATE_RENDER(R)                                                                               \
  template struct Upsampler<R>;                                                                                     \
  template std::vector<R> composite_weights<R>(const std::vector<R>&, R, std::vector<R>*);                          \
  template RenderVars<R> volume_render<R>(const ad::Var<R>&, R, const DecoderMLP<R>&, const CameraPose&, int, int,   \
                                          const RenderSettings&);                                                   \
  template ad::Var<R> upsample<R>(const ad::Var<R>&, const ad::Var<R>&, const Upsampler<R>&);                       \
  template RenderVars<R> render_full<R>(const ad::Var<R>&, R, const DecoderMLP<R>&, const Upsampler<R>&,             \
                                        const CameraPose&, int, int, const RenderSettings&);

TRIEDIT_INSTANTIATE_RENDER(float)
TRIEDIT_INSTANTIATE_RENDER(double)

}  // namespace triedit
