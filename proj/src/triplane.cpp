// SPDX-License-Identifier: Apache-2.0
#include "triedit/triplane.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "triedit/optim.hpp"

namespace triedit {

template <typename Real>
Triplane<Real> Triplane<Real>::zeros(int channels, int resolution, Real extent) {
  require(channels >= 1, "triplane needs at least one channel");
  require(resolution >= 2, "triplane resolution must be >= 2");
  return Triplane{Tensor<Real>({3, resolution, resolution, channels}), extent};
}

template <typename Real>
Triplane<Real> Triplane<Real>::from_channel_last(Tensor<Real> planes, Real extent) {
  Triplane t{std::move(planes), extent};
  t.validate();
  return t;
}

template <typename Real>
void Triplane<Real>::validate() const {
  require(planes.rank() == 4 && planes.dim(0) == 3, "triplane must hold exactly 3 planes, got " + shape_str(planes.shape()));
  require(planes.dim(1) == planes.dim(2), "triplane planes must be square");
  require(planes.dim(1) >= 2, "triplane resolution must be >= 2");
  require(planes.dim(3) >= 1, "triplane needs at least one channel");
  require(extent > 0, "triplane extent must be positive");
  for (std::size_t i = 0; i < planes.size(); ++i) require(std::isfinite(planes[i]), "triplane contains non-finite values");
}

namespace {

struct PlaneTap {
  int offset[4];  // element offsets of the 4 corner feature vectors
};

template <typename Real>
void plane_taps(Real u, Real v, Real extent, int res, int channels, int plane, PlaneTap& tap, Real* w) {
  const Real scale = static_cast<Real>(res - 1) / (Real(2) * extent);
  const Real gu = std::clamp((u + extent) * scale, Real(0), static_cast<Real>(res - 1));
  const Real gv = std::clamp((v + extent) * scale, Real(0), static_cast<Real>(res - 1));
  const int c0 = std::min(static_cast<int>(gu), res - 2);
  const int r0 = std::min(static_cast<int>(gv), res - 2);
  const Real fu = gu - c0, fv = gv - r0;
  const int base = plane * res * res;
  tap.offset[0] = (base + r0 * res + c0) * channels;
  tap.offset[1] = (base + r0 * res + c0 + 1) * channels;
  tap.offset[2] = (base + (r0 + 1) * res + c0) * channels;
  tap.offset[3] = (base + (r0 + 1) * res + c0 + 1) * channels;
  w[0] = (Real(1) - fv) * (Real(1) - fu);
  w[1] = (Real(1) - fv) * fu;
  w[2] = fv * (Real(1) - fu);
  w[3] = fv * fu;
}

}  // namespace

template <typename Real>
ad::Var<Real> sample_triplane(const ad::Var<Real>& planes, Real extent, const std::vector<Real>& points) {
  const auto& ps = planes.shape();
  require(ps.size() == 4 && ps[0] == 3 && ps[1] == ps[2] && ps[1] >= 2, "sample_triplane: planes must be [3,R,R,C]");
  require(points.size() % 3 == 0, "sample_triplane: points must be [N,3]");
  const int res = ps[1], channels = ps[3];
  const int n = static_cast<int>(points.size() / 3);
  for (Real p : points) require(std::isfinite(p), "sample_triplane: non-finite point coordinate");

  std::vector<PlaneTap> taps(static_cast<std::size_t>(n) * 3);
  std::vector<Real> weights(static_cast<std::size_t>(n) * 12);
  Tensor<Real> out({n, channels});
  const Real* pv = planes.value().data();
  for (int i = 0; i < n; ++i) {
    const Real x = points[3 * i], y = points[3 * i + 1], z = points[3 * i + 2];
    const Real uv[3][2] = {{x, y}, {x, z}, {y, z}};
    Real* o = out.data() + static_cast<std::size_t>(i) * channels;
    for (int p = 0; p < 3; ++p) {
      PlaneTap& tap = taps[static_cast<std::size_t>(i) * 3 + p];
      Real* w = weights.data() + static_cast<std::size_t>(i) * 12 + p * 4;
      plane_taps(uv[p][0], uv[p][1], extent, res, channels, p, tap, w);
      for (int k = 0; k < 4; ++k) {
        const Real* f = pv + tap.offset[k];
        const Real wk = w[k];
        for (int c = 0; c < channels; ++c) o[c] += wk * f[c];
      }
    }
  }
  return ad::make_op<Real>(std::move(out), {planes},
                           [n, channels, taps = std::move(taps), weights = std::move(weights)](ad::Node<Real>& nd) {
                             Real* g = nd.inputs[0]->grad_buffer().data();
                             for (int i = 0; i < n; ++i) {
                               const Real* go = nd.grad.data() + static_cast<std::size_t>(i) * channels;
                               for (int p = 0; p < 3; ++p) {
                                 const PlaneTap& tap = taps[static_cast<std::size_t>(i) * 3 + p];
                                 const Real* w = weights.data() + static_cast<std::size_t>(i) * 12 + p * 4;
                                 for (int k = 0; k < 4; ++k) {
                                   Real* dst = g + tap.offset[k];
                                   const Real wk = w[k];
                                   for (int c = 0; c < channels; ++c) dst[c] += wk * go[c];
                                 }
                               }
                             }
                           });
}

template <typename Real>
Tensor<Real> sample_triplane(const Triplane<Real>& t, const Tensor<Real>& points) {
  t.validate();
  require(points.rank() == 2 && points.dim(1) == 3, "sample_triplane: points must be [N,3]");
  if (points.size() == 0) return Tensor<Real>({0, t.channels()});
  ad::NoGradGuard no_grad;
  auto planes = ad::Var<Real>::constant(t.planes);
  return sample_triplane(planes, t.extent, points.storage()).value();
}

template <typename Real>
DecoderMLP<Real> DecoderMLP<Real>::init(int in_dim, int hidden, int color_dim, std::uint64_t seed, bool requires_grad) {
  require(in_dim >= 1 && hidden >= 1 && color_dim >= 3, "decoder dims must be positive with >= 3 colour channels");
  std::mt19937_64 rng(seed);
  auto xavier = [&](int fan_in, int fan_out) {
    Tensor<Real> w({fan_in, fan_out});
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : w.storage()) v = static_cast<Real>(dist(rng));
    return w;
  };
  DecoderMLP d;
  d.w1 = ad::Var<Real>::leaf(xavier(in_dim, hidden), requires_grad);
  d.b1 = ad::Var<Real>::leaf(Tensor<Real>({hidden}), requires_grad);
  d.w2 = ad::Var<Real>::leaf(xavier(hidden, 1 + color_dim), requires_grad);
  d.b2 = ad::Var<Real>::leaf(Tensor<Real>({1 + color_dim}), requires_grad);
  return d;
}

template <typename Real>
ad::Var<Real> decoder_forward(const ad::Var<Real>& features, const DecoderMLP<Real>& decoder) {
  require(features.shape().size() == 2 && features.shape()[1] == decoder.in_dim(),
          "decode_field: feature dim " + shape_str(features.shape()) + " does not match decoder input " +
              std::to_string(decoder.in_dim()));
  auto h = ad::softplus(ad::linear(features, decoder.w1, decoder.b1));
  return ad::linear(h, decoder.w2, decoder.b2);
}

template <typename Real>
ad::Var<Real> activate_field(const ad::Var<Real>& raw) {
  const int n = raw.shape()[0], cols = raw.shape()[1];
  Tensor<Real> y(raw.shape());
  const Real* rv = raw.value().data();
  for (int i = 0; i < n; ++i) {
    const Real* r = rv + static_cast<std::size_t>(i) * cols;
    Real* o = y.data() + static_cast<std::size_t>(i) * cols;
    o[0] = std::max(r[0], Real(0)) + std::log1p(std::exp(-std::abs(r[0])));
    for (int c = 1; c < cols; ++c) o[c] = Real(1) / (Real(1) + std::exp(-r[c]));
  }
  return ad::make_op<Real>(std::move(y), {raw}, [n, cols](ad::Node<Real>& nd) {
    Real* g = nd.inputs[0]->grad_buffer().data();
    const Real* rv = nd.inputs[0]->value.data();
    for (int i = 0; i < n; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * cols;
      g[o] += nd.grad[o] / (Real(1) + std::exp(-rv[o]));
      for (int c = 1; c < cols; ++c) {
        const Real s = nd.value[o + c];
        g[o + c] += nd.grad[o + c] * s * (Real(1) - s);
      }
    }
  });
}

template <typename Real>
FieldSamples<Real> decode_field(const Tensor<Real>& features, const DecoderMLP<Real>& decoder) {
  require(features.rank() == 2, "decode_field: features must be [N, C]");
  ad::NoGradGuard no_grad;
  auto act = activate_field(decoder_forward(ad::Var<Real>::constant(features), decoder)).value();
  const int n = features.dim(0), cols = act.dim(1);
  FieldSamples<Real> out{Tensor<Real>({n}), Tensor<Real>({n, cols - 1})};
  for (int i = 0; i < n; ++i) {
    out.density[i] = act[static_cast<std::size_t>(i) * cols];
    for (int c = 1; c < cols; ++c) out.color[static_cast<std::size_t>(i) * (cols - 1) + c - 1] = act[static_cast<std::size_t>(i) * cols + c];
  }
  return out;
}

// --------------------------------------------------------------------------

namespace {

double inverse_softplus(double sigma, double floor_raw) {
  if (sigma <= 0) return floor_raw;
  const double raw = sigma > 20 ? sigma : std::log(std::expm1(sigma));
  return std::max(raw, floor_raw);
}

// Loss over raw decoder outputs [B, 1+Cf] against per-point targets.
ad::Var<float> fit_loss(const ad::Var<float>& raw, const std::vector<float>& raw_density, const std::vector<float>& rgb,
                        const std::vector<float>& color_w) {
  const int b = raw.shape()[0], cols = raw.shape()[1];
  constexpr float kDensityScale = 0.1f;
  double loss = 0;
  Tensor<float> grad({b, cols});
  const float* rv = raw.value().data();
  for (int i = 0; i < b; ++i) {
    const float* r = rv + static_cast<std::size_t>(i) * cols;
    float* g = grad.data() + static_cast<std::size_t>(i) * cols;
    const float d = (r[0] - raw_density[i]) * kDensityScale;
    loss += d * d;
    g[0] = 2.f * d * kDensityScale;
    for (int c = 0; c < 3; ++c) {
      const float s = 1.f / (1.f + std::exp(-r[1 + c]));
      const float e = s - rgb[3 * i + c];
      loss += color_w[i] * e * e;
      g[1 + c] = 2.f * color_w[i] * e * s * (1.f - s);
    }
  }
  const float inv_b = 1.f / static_cast<float>(b);
  for (auto& v : grad.storage()) v *= inv_b;
  return ad::make_op<float>(Tensor<float>({1}, std::vector<float>{static_cast<float>(loss * inv_b)}), {raw},
                            [grad = std::move(grad)](ad::Node<float>& nd) {
                              auto& g = nd.inputs[0]->grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[0] * grad[i];
                            });
}

}  // namespace

Triplane<float> fit_triplane_to_field(const FieldFunction& field, const DecoderMLP<float>& decoder, const FitOptions& opt) {
  require(opt.grid >= 2 && opt.iterations >= 0 && opt.batch >= 1, "fit_triplane_to_field: invalid options");
  require(decoder.in_dim() == opt.channels, "fit_triplane_to_field: decoder input dim does not match channel count");
  const int g = opt.grid;
  const std::size_t total = static_cast<std::size_t>(g) * g * g;
  std::vector<float> pts(total * 3), raw_target(total), rgb_target(total * 3), color_w(total);
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j)
      for (int k = 0; k < g; ++k) {
        const std::size_t idx = (static_cast<std::size_t>(i) * g + j) * g + k;
        const double p[3] = {opt.extent * (-1.0 + (2.0 * i + 1.0) / g), opt.extent * (-1.0 + (2.0 * j + 1.0) / g),
                             opt.extent * (-1.0 + (2.0 * k + 1.0) / g)};
        double sigma = 0, rgb[3] = {0, 0, 0};
        field(p, sigma, rgb);
        for (int c = 0; c < 3; ++c) {
          pts[idx * 3 + c] = static_cast<float>(p[c]);
          rgb_target[idx * 3 + c] = static_cast<float>(rgb[c]);
        }
        raw_target[idx] = static_cast<float>(inverse_softplus(sigma, opt.min_raw_density));
        color_w[idx] = static_cast<float>(opt.color_weight * (1.0 - std::exp(-0.5 * sigma)));
      }

  Triplane<float> t = Triplane<float>::zeros(opt.channels, opt.resolution, static_cast<float>(opt.extent));
  auto planes = ad::Var<float>::leaf(t.planes, true);
  // Frozen copy of the decoder so that no gradient lands on the caller's parameters.
  DecoderMLP<float> dec{ad::Var<float>::constant(decoder.w1.value()), ad::Var<float>::constant(decoder.b1.value()),
                        ad::Var<float>::constant(decoder.w2.value()), ad::Var<float>::constant(decoder.b2.value())};
  AdamMoments<float> mom;
  AdamHyper hyper;
  hyper.lr = opt.lr;
  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  const int b = static_cast<int>(std::min<std::size_t>(opt.batch, total));
  std::vector<float> bp(static_cast<std::size_t>(b) * 3), bd(b), brgb(static_cast<std::size_t>(b) * 3), bw(b);
  for (int it = 0; it < opt.iterations; ++it) {
    for (int s = 0; s < b; ++s) {
      const std::size_t idx = pick(rng);
      for (int c = 0; c < 3; ++c) {
        bp[3 * s + c] = pts[idx * 3 + c];
        brgb[3 * s + c] = rgb_target[idx * 3 + c];
      }
      bd[s] = raw_target[idx];
      bw[s] = color_w[idx];
    }
    planes.zero_grad();
    auto raw = decoder_forward(sample_triplane(planes, t.extent, bp), dec);
    ad::backward(fit_loss(raw, bd, brgb, bw));
    adam_update(planes.mutable_value(), planes.grad(), mom, it + 1, hyper);
  }
  t.planes = planes.value();
  return t;
}

// --------------------------------------------------------------------------

namespace {

void write_le_floats(std::ostream& os, const std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  } else {
    for (float f : v) {
      auto u = std::bit_cast<std::uint32_t>(f);
      char b[4] = {char(u & 0xff), char((u >> 8) & 0xff), char((u >> 16) & 0xff), char((u >> 24) & 0xff)};
      os.write(b, 4);
    }
  }
}

std::vector<float> read_le_floats(std::istream& is, std::size_t count) {
  std::vector<float> v(count);
  std::vector<unsigned char> bytes(count * 4);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size()) throw IoError("truncated float payload");
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t u = bytes[4 * i] | (bytes[4 * i + 1] << 8) | (bytes[4 * i + 2] << 16) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

}  // namespace

void write_triplane(std::ostream& os, const Triplane<float>& t) {
  t.validate();
  const int c = t.channels(), r = t.resolution();
  std::ostringstream header;
  header.precision(9);
  header << "TRIPLANE v1 " << c << ' ' << r << ' ' << t.extent << '\n';
  os << header.str();
  std::vector<float> out(t.planes.size());
  std::size_t o = 0;
  for (int p = 0; p < 3; ++p)
    for (int ch = 0; ch < c; ++ch)
      for (int row = 0; row < r; ++row)
        for (int col = 0; col < r; ++col) out[o++] = t.at(p, ch, row, col);
  write_le_floats(os, out);
  if (!os) throw IoError("failed to write triplane");
}

Triplane<float> read_triplane(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("missing triplane header");
  std::istringstream hs(line);
  std::string magic, version;
  int c = 0, r = 0;
  float extent = 0;
  hs >> magic >> version >> c >> r >> extent;
  if (!hs || magic != "TRIPLANE" || version != "v1") throw IoError("bad triplane header: " + line);
  if (c < 1 || r < 2 || !(extent > 0)) throw IoError("bad triplane dimensions: " + line);
  auto data = read_le_floats(is, static_cast<std::size_t>(3) * c * r * r);
  Triplane<float> t = Triplane<float>::zeros(c, r, extent);
  std::size_t o = 0;
  for (int p = 0; p < 3; ++p)
    for (int ch = 0; ch < c; ++ch)
      for (int row = 0; row < r; ++row)
        for (int col = 0; col < r; ++col) t.at(p, ch, row, col) = data[o++];
  t.validate();
  return t;
}

void save_triplane(const std::string& path, const Triplane<float>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_triplane(os, t);
}

Triplane<float> load_triplane(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_triplane(is);
}

template struct Triplane<float>;
template struct Triplane<double>;
template struct DecoderMLP<float>;
template struct DecoderMLP<double>;
template ad::Var<float> sample_triplane<float>(const ad::Var<float>&, float, const std::vector<float>&);
template ad::Var<double> sample_triplane<double>(const ad::Var<double>&, double, const std::vector<double>&);
template Tensor<float> sample_triplane<float>(const Triplane<float>&, const Tensor<float>&);
template Tensor<double> sample_triplane<double>(const Triplane<double>&, const Tensor<double>&);
template ad::Var<float> decoder_forward<float>(const ad::Var<float>&, const DecoderMLP<float>&);
template ad::Var<double> decoder_forward<double>(const ad::Var<double>&, const DecoderMLP<double>&);
template ad::Var<float> activate_field<float>(const ad::Var<float>&);
template ad::Var<double> activate_field<double>(const ad::Var<double>&);
template FieldSamples<float> decode_field<float>(const Tensor<float>&, const DecoderMLP<float>&);
template FieldSamples<double> decode_field<double>(const Tensor<double>&, const DecoderMLP<double>&);

}  // namespace triedit
