// SPDX-License-Identifier: Apache-2.0
#include "triedit/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace triedit {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace ad {
namespace {

thread_local bool g_grad_enabled = true;

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using CMatMap = Eigen::Map<const RowMat<Real>>;

template <typename Real>
MatMap<Real> mat(Tensor<Real>& t, int rows, int cols) {
  return MatMap<Real>(t.data(), rows, cols);
}
template <typename Real>
CMatMap<Real> mat(const Tensor<Real>& t, int rows, int cols) {
  return CMatMap<Real>(t.data(), rows, cols);
}

void check_rank(const Shape& s, int rank, const char* op) {
  require(static_cast<int>(s.size()) == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

template <typename Real>
bool wants(const Node<Real>& n, std::size_t i) {
  return n.inputs[i]->requires_grad;
}

template <typename Real, typename F, typename DF>
Var<Real> unary(const Var<Real>& x, F f, DF df) {
  Tensor<Real> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return make_op<Real>(std::move(y), {x}, [df](Node<Real>& n) {
    const auto& xv = n.inputs[0]->value;
    auto& gx = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i] * df(xv[i], n.value[i]);
  });
}

template <typename Real>
Real stable_sigmoid(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Real>
Var<Real> make_op(Tensor<Real> value, std::vector<Var<Real>> inputs, std::function<void(Node<Real>&)> backward_fn) {
  auto node = std::make_shared<Node<Real>>();
  node->value = std::move(value);
  if (!g_grad_enabled) return Var<Real>(std::move(node));
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var<Real>& v) { return v.requires_grad(); });
  if (!any) return Var<Real>(std::move(node));
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (auto& v : inputs) node->inputs.push_back(v.shared());
  node->backward = std::move(backward_fn);
  return Var<Real>(std::move(node));
}

template <typename Real>
void backward(const Var<Real>& root) {
  require(root.size() == 1, "backward: root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  // Iterative post-order DFS yields a topological order.
  std::vector<Node<Real>*> order;
  std::unordered_set<Node<Real>*> seen;
  std::vector<std::pair<Node<Real>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<Real>* child = n->inputs[next++].get();
      if (child->requires_grad && child->backward && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Real>* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
  // Intermediate gradients are not needed once propagated.
  for (Node<Real>* n : order)
    if (n != root.node()) n->grad = Tensor<Real>();
}

// --------------------------------------------------------------------------

template <typename Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  check_rank(a.shape(), 2, "matmul");
  check_rank(b.shape(), 2, "matmul");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<Real> y({m, n});
  mat(y, m, n).noalias() = mat(a.value(), m, k) * mat(b.value(), k, n);
  return make_op<Real>(std::move(y), {a, b}, [m, k, n](Node<Real>& nd) {
    auto g = mat(std::as_const(nd.grad), m, n);
    if (wants(nd, 0)) mat(nd.inputs[0]->grad_buffer(), m, k).noalias() += g * mat(std::as_const(nd.inputs[1]->value), k, n).transpose();
    if (wants(nd, 1)) mat(nd.inputs[1]->grad_buffer(), k, n).noalias() += mat(std::as_const(nd.inputs[0]->value), m, k).transpose() * g;
  });
}

template <typename Real>
Var<Real> linear(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b) {
  check_rank(x.shape(), 2, "linear");
  check_rank(w.shape(), 2, "linear");
  const int m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  require(w.shape()[0] == k, "linear: input dim " + std::to_string(k) + " does not match weight " + shape_str(w.shape()));
  const bool has_bias = b.defined();
  if (has_bias) require(b.size() == static_cast<std::size_t>(n), "linear: bias size mismatch");
  Tensor<Real> y({m, n});
  auto ym = mat(y, m, n);
  ym.noalias() = mat(x.value(), m, k) * mat(w.value(), k, n);
  if (has_bias) ym.rowwise() += mat(b.value(), 1, n).row(0);
  std::vector<Var<Real>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_op<Real>(std::move(y), std::move(inputs), [m, k, n, has_bias](Node<Real>& nd) {
    auto g = mat(std::as_const(nd.grad), m, n);
    if (wants(nd, 0)) mat(nd.inputs[0]->grad_buffer(), m, k).noalias() += g * mat(std::as_const(nd.inputs[1]->value), k, n).transpose();
    if (wants(nd, 1)) mat(nd.inputs[1]->grad_buffer(), k, n).noalias() += mat(std::as_const(nd.inputs[0]->value), m, k).transpose() * g;
    if (has_bias && wants(nd, 2)) mat(nd.inputs[2]->grad_buffer(), 1, n) += g.colwise().sum();
  });
}

template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<Real> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_op<Real>(std::move(y), {a, b}, [](Node<Real>& nd) {
    for (int j = 0; j < 2; ++j) {
      if (!wants(nd, j)) continue;
      auto& g = nd.inputs[j]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
    }
  });
}

template <typename Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<Real> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_op<Real>(std::move(y), {a, b}, [](Node<Real>& nd) {
    for (int j = 0; j < 2; ++j) {
      if (!wants(nd, j)) continue;
      const Real sign = j == 0 ? Real(1) : Real(-1);
      auto& g = nd.inputs[j]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * nd.grad[i];
    }
  });
}

template <typename Real>
Var<Real> scale(const Var<Real>& a, Real s) {
  return unary<Real>(a, [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
}

template <typename Real>
Var<Real> add_row(const Var<Real>& x, const Var<Real>& row) {
  check_rank(x.shape(), 2, "add_row");
  const int m = x.shape()[0], n = x.shape()[1];
  require(row.size() == static_cast<std::size_t>(n), "add_row: row size mismatch");
  Tensor<Real> y = x.value();
  mat(y, m, n).rowwise() += mat(row.value(), 1, n).row(0);
  return make_op<Real>(std::move(y), {x, row}, [m, n](Node<Real>& nd) {
    if (wants(nd, 0)) {
      auto& g = nd.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
    }
    if (wants(nd, 1)) mat(nd.inputs[1]->grad_buffer(), 1, n) += mat(std::as_const(nd.grad), m, n).colwise().sum();
  });
}

template <typename Real>
Var<Real> gelu(const Var<Real>& x) {
  constexpr Real c = Real(0.7978845608028654);  // sqrt(2/pi)
  constexpr Real a = Real(0.044715);
  return unary<Real>(
      x,
      [](Real v) { return Real(0.5) * v * (Real(1) + std::tanh(c * (v + a * v * v * v))); },
      [](Real v, Real) {
        const Real t = std::tanh(c * (v + a * v * v * v));
        return Real(0.5) * (Real(1) + t) + Real(0.5) * v * (Real(1) - t * t) * c * (Real(1) + Real(3) * a * v * v);
      });
}

template <typename Real>
Var<Real> silu(const Var<Real>& x) {
  return unary<Real>(
      x, [](Real v) { return v * stable_sigmoid(v); },
      [](Real v, Real) {
        const Real s = stable_sigmoid(v);
        return s * (Real(1) + v * (Real(1) - s));
      });
}

template <typename Real>
Var<Real> softplus(const Var<Real>& x) {
  return unary<Real>(
      x, [](Real v) { return std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](Real v, Real) { return stable_sigmoid(v); });
}

template <typename Real>
Var<Real> sigmoid(const Var<Real>& x) {
  return unary<Real>(x, [](Real v) { return stable_sigmoid(v); }, [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Var<Real> logit_clamped(const Var<Real>& x, Real eps) {
  return unary<Real>(
      x,
      [eps](Real v) {
        const Real c = std::clamp(v, eps, Real(1) - eps);
        return std::log(c / (Real(1) - c));
      },
      [eps](Real v, Real) { return (v > eps && v < Real(1) - eps) ? Real(1) / (v * (Real(1) - v)) : Real(0); });
}

template <typename Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, Real eps) {
  check_rank(x.shape(), 2, "layer_norm");
  const int m = x.shape()[0], n = x.shape()[1];
  require(gamma.size() == static_cast<std::size_t>(n) && beta.size() == static_cast<std::size_t>(n),
          "layer_norm: affine size mismatch");
  Tensor<Real> y({m, n});
  Tensor<Real> xhat({m, n});
  std::vector<Real> inv_std(m);
  const Real* xv = x.value().data();
  const Real* gv = gamma.value().data();
  const Real* bv = beta.value().data();
  for (int r = 0; r < m; ++r) {
    Real mu = 0;
    for (int c = 0; c < n; ++c) mu += xv[r * n + c];
    mu /= n;
    Real var = 0;
    for (int c = 0; c < n; ++c) var += (xv[r * n + c] - mu) * (xv[r * n + c] - mu);
    var /= n;
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int c = 0; c < n; ++c) {
      const Real h = (xv[r * n + c] - mu) * is;
      xhat[r * n + c] = h;
      y[r * n + c] = gv[c] * h + bv[c];
    }
  }
  return make_op<Real>(std::move(y), {x, gamma, beta},
                       [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Real>& nd) {
                         const Real* g = nd.grad.data();
                         const Real* gv = nd.inputs[1]->value.data();
                         if (wants(nd, 1)) {
                           auto& gg = nd.inputs[1]->grad_buffer();
                           for (int r = 0; r < m; ++r)
                             for (int c = 0; c < n; ++c) gg[c] += g[r * n + c] * xhat[r * n + c];
                         }
                         if (wants(nd, 2)) {
                           auto& gb = nd.inputs[2]->grad_buffer();
                           for (int r = 0; r < m; ++r)
                             for (int c = 0; c < n; ++c) gb[c] += g[r * n + c];
                         }
                         if (wants(nd, 0)) {
                           auto& gx = nd.inputs[0]->grad_buffer();
                           for (int r = 0; r < m; ++r) {
                             Real mean_d = 0, mean_dh = 0;
                             for (int c = 0; c < n; ++c) {
                               const Real d = g[r * n + c] * gv[c];
                               mean_d += d;
                               mean_dh += d * xhat[r * n + c];
                             }
                             mean_d /= n;
                             mean_dh /= n;
                             for (int c = 0; c < n; ++c) {
                               const Real d = g[r * n + c] * gv[c];
                               gx[r * n + c] += inv_std[r] * (d - mean_d - xhat[r * n + c] * mean_dh);
                             }
                           }
                         }
                       });
}

template <typename Real>
Var<Real> attention(const Var<Real>& q, const Var<Real>& k, const Var<Real>& v) {
  check_rank(q.shape(), 2, "attention");
  check_rank(k.shape(), 2, "attention");
  check_rank(v.shape(), 2, "attention");
  const int lq = q.shape()[0], d = q.shape()[1], lk = k.shape()[0], dv = v.shape()[1];
  require(k.shape()[1] == d, "attention: query/key dim mismatch");
  require(v.shape()[0] == lk, "attention: key/value length mismatch");
  require(lk >= 1, "attention: empty key sequence");
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(d));
  Tensor<Real> p({lq, lk});
  auto pm = mat(p, lq, lk);
  pm.noalias() = (mat(q.value(), lq, d) * mat(k.value(), lk, d).transpose()) * inv_sqrt;
  for (int r = 0; r < lq; ++r) {
    const Real mx = pm.row(r).maxCoeff();
    pm.row(r) = (pm.row(r).array() - mx).exp();
    pm.row(r) /= pm.row(r).sum();
  }
  Tensor<Real> y({lq, dv});
  mat(y, lq, dv).noalias() = pm * mat(v.value(), lk, dv);
  return make_op<Real>(std::move(y), {q, k, v}, [lq, lk, d, dv, inv_sqrt, p = std::move(p)](Node<Real>& nd) {
    auto g = mat(std::as_const(nd.grad), lq, dv);
    auto pm = mat(p, lq, lk);
    auto qm = mat(std::as_const(nd.inputs[0]->value), lq, d);
    auto km = mat(std::as_const(nd.inputs[1]->value), lk, d);
    auto vm = mat(std::as_const(nd.inputs[2]->value), lk, dv);
    if (wants(nd, 2)) mat(nd.inputs[2]->grad_buffer(), lk, dv).noalias() += pm.transpose() * g;
    if (!wants(nd, 0) && !wants(nd, 1)) return;
    RowMat<Real> dp = g * vm.transpose();
    RowMat<Real> ds(lq, lk);
    for (int r = 0; r < lq; ++r) {
      const Real dot = (dp.row(r).array() * pm.row(r).array()).sum();
      ds.row(r) = pm.row(r).array() * (dp.row(r).array() - dot);
    }
    ds *= inv_sqrt;
    if (wants(nd, 0)) mat(nd.inputs[0]->grad_buffer(), lq, d).noalias() += ds * km;
    if (wants(nd, 1)) mat(nd.inputs[1]->grad_buffer(), lk, d).noalias() += ds.transpose() * qm;
  });
}

template <typename Real>
Var<Real> concat_rows(const Var<Real>& a, const Var<Real>& b) {
  check_rank(a.shape(), 2, "concat_rows");
  check_rank(b.shape(), 2, "concat_rows");
  require(a.shape()[1] == b.shape()[1], "concat_rows: column mismatch");
  const int ma = a.shape()[0], mb = b.shape()[0], n = a.shape()[1];
  Tensor<Real> y({ma + mb, n});
  std::copy(a.value().data(), a.value().data() + a.size(), y.data());
  std::copy(b.value().data(), b.value().data() + b.size(), y.data() + a.size());
  return make_op<Real>(std::move(y), {a, b}, [](Node<Real>& nd) {
    std::size_t off = 0;
    for (int j = 0; j < 2; ++j) {
      const std::size_t sz = nd.inputs[j]->value.size();
      if (wants(nd, j)) {
        auto& g = nd.inputs[j]->grad_buffer();
        for (std::size_t i = 0; i < sz; ++i) g[i] += nd.grad[off + i];
      }
      off += sz;
    }
  });
}

template <typename Real>
Var<Real> slice_rows(const Var<Real>& x, int start, int count) {
  check_rank(x.shape(), 2, "slice_rows");
  const int m = x.shape()[0], n = x.shape()[1];
  require(start >= 0 && count >= 0 && start + count <= m, "slice_rows: range out of bounds");
  Tensor<Real> y({count, n});
  std::copy(x.value().data() + static_cast<std::size_t>(start) * n,
            x.value().data() + static_cast<std::size_t>(start + count) * n, y.data());
  return make_op<Real>(std::move(y), {x}, [start, n](Node<Real>& nd) {
    auto& g = nd.inputs[0]->grad_buffer();
    const std::size_t off = static_cast<std::size_t>(start) * n;
    for (std::size_t i = 0; i < nd.grad.size(); ++i) g[off + i] += nd.grad[i];
  });
}

template <typename Real>
Var<Real> gather(const Var<Real>& x, std::vector<int> index, Shape out_shape) {
  require(shape_numel(out_shape) == index.size(), "gather: index count does not match output shape");
  const auto& xv = x.value();
  Tensor<Real> y(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && static_cast<std::size_t>(index[i]) < xv.size(), "gather: index out of range");
    y[i] = xv[index[i]];
  }
  return make_op<Real>(std::move(y), {x}, [index = std::move(index)](Node<Real>& nd) {
    auto& g = nd.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += nd.grad[i];
  });
}

template <typename Real>
Var<Real> reshape(const Var<Real>& x, Shape shape) {
  Tensor<Real> y = x.value().reshaped(std::move(shape));
  return make_op<Real>(std::move(y), {x}, [](Node<Real>& nd) {
    auto& g = nd.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
  });
}

template <typename Real>
Var<Real> conv2d(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b, int stride, int pad) {
  check_rank(x.shape(), 3, "conv2d");
  check_rank(w.shape(), 4, "conv2d");
  const int h = x.shape()[0], wd = x.shape()[1], cin = x.shape()[2];
  const int kh = w.shape()[0], kw = w.shape()[1], cout = w.shape()[3];
  require(w.shape()[2] == cin, "conv2d: input channels " + std::to_string(cin) + " do not match kernel " + shape_str(w.shape()));
  require(stride >= 1 && pad >= 0, "conv2d: invalid stride/padding");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  require(ho >= 1 && wo >= 1, "conv2d: output would be empty");
  const bool has_bias = b.defined();
  if (has_bias) require(b.size() == static_cast<std::size_t>(cout), "conv2d: bias size mismatch");
  const int kdim = kh * kw * cin;
  const int npix = ho * wo;
  // im2col: cols[p, (ky*kw + kx)*cin + c]
  Tensor<Real> cols({npix, kdim});
  const Real* xv = x.value().data();
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      Real* row = cols.data() + static_cast<std::size_t>(oy * wo + ox) * kdim;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad + ky;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - pad + kx;
          Real* dst = row + (ky * kw + kx) * cin;
          if (iy < 0 || iy >= h || ix < 0 || ix >= wd) {
            std::fill(dst, dst + cin, Real(0));
          } else {
            const Real* src = xv + (static_cast<std::size_t>(iy) * wd + ix) * cin;
            std::copy(src, src + cin, dst);
          }
        }
      }
    }
  Tensor<Real> y({ho, wo, cout});
  auto ym = mat(y, npix, cout);
  ym.noalias() = mat(std::as_const(cols), npix, kdim) * mat(w.value(), kdim, cout);
  if (has_bias) ym.rowwise() += mat(b.value(), 1, cout).row(0);
  std::vector<Var<Real>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_op<Real>(
      std::move(y), std::move(inputs),
      [=, cols = std::move(cols)](Node<Real>& nd) {
        auto g = mat(std::as_const(nd.grad), npix, cout);
        if (wants(nd, 1)) mat(nd.inputs[1]->grad_buffer(), kdim, cout).noalias() += mat(cols, npix, kdim).transpose() * g;
        if (has_bias && wants(nd, 2)) mat(nd.inputs[2]->grad_buffer(), 1, cout) += g.colwise().sum();
        if (wants(nd, 0)) {
          RowMat<Real> dcols = g * mat(std::as_const(nd.inputs[1]->value), kdim, cout).transpose();
          Real* gx = nd.inputs[0]->grad_buffer().data();
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const Real* row = dcols.data() + static_cast<std::size_t>(oy * wo + ox) * kdim;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= wd) continue;
                  Real* dst = gx + (static_cast<std::size_t>(iy) * wd + ix) * cin;
                  const Real* src = row + (ky * kw + kx) * cin;
                  for (int c = 0; c < cin; ++c) dst[c] += src[c];
                }
              }
            }
        }
      });
}

template <typename Real>
Var<Real> upsample_nearest(const Var<Real>& x, int factor) {
  check_rank(x.shape(), 3, "upsample_nearest");
  require(factor >= 1, "upsample_nearest: factor must be >= 1");
  const int h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  const int H = h * factor, W = w * factor;
  std::vector<int> index(static_cast<std::size_t>(H) * W * c);
  for (int y = 0; y < H; ++y)
    for (int xx = 0; xx < W; ++xx)
      for (int k = 0; k < c; ++k)
        index[(static_cast<std::size_t>(y) * W + xx) * c + k] = ((y / factor) * w + xx / factor) * c + k;
  return gather(x, std::move(index), {H, W, c});
}

template <typename Real>
Var<Real> mean_squared_error(const Var<Real>& a, const Var<Real>& b) {
  require(a.shape() == b.shape(), "mean_squared_error: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  require(a.size() > 0, "mean_squared_error: empty input");
  Real acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Real d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  const Real inv_n = Real(1) / static_cast<Real>(a.size());
  return make_op<Real>(Tensor<Real>({1}, std::vector<Real>{acc * inv_n}), {a, b}, [inv_n](Node<Real>& nd) {
    const Real g = nd.grad[0] * Real(2) * inv_n;
    const auto& av = nd.inputs[0]->value;
    const auto& bv = nd.inputs[1]->value;
    if (wants(nd, 0)) {
      auto& ga = nd.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (av[i] - bv[i]);
    }
    if (wants(nd, 1)) {
      auto& gb = nd.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
    }
  });
}

namespace {
template <typename Real>
Real sign_of(Real v) {
  return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0));
}
}  // namespace

template <typename Real>
Var<Real> mean_abs_error(const Var<Real>& a, const Var<Real>& b) {
  return masked_mean_abs_error(a, b, Tensor<Real>(a.shape(), Real(1)));
}

template <typename Real>
Var<Real> masked_mean_abs_error(const Var<Real>& a, const Var<Real>& b, const Tensor<Real>& mask) {
  require(a.shape() == b.shape(), "mean_abs_error: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  require(mask.size() == a.size(), "mean_abs_error: mask size mismatch");
  Real acc = 0, count = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += mask[i] * std::abs(a.value()[i] - b.value()[i]);
    count += mask[i];
  }
  const Real inv_n = Real(1) / std::max(count, Real(1));
  return make_op<Real>(Tensor<Real>({1}, std::vector<Real>{acc * inv_n}), {a, b}, [inv_n, mask](Node<Real>& nd) {
    const Real g = nd.grad[0] * inv_n;
    const auto& av = nd.inputs[0]->value;
    const auto& bv = nd.inputs[1]->value;
    for (int j = 0; j < 2; ++j) {
      if (!wants(nd, j)) continue;
      const Real s = j == 0 ? Real(1) : Real(-1);
      auto& gj = nd.inputs[j]->grad_buffer();
      for (std::size_t i = 0; i < gj.size(); ++i) gj[i] += s * g * mask[i] * sign_of(av[i] - bv[i]);
    }
  });
}

template <typename Real>
Var<Real> weighted_sum(const std::vector<Var<Real>>& terms, const std::vector<Real>& weights) {
  require(terms.size() == weights.size(), "weighted_sum: terms/weights length mismatch");
  Real acc = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require(terms[i].size() == 1, "weighted_sum: terms must be scalars");
    acc += weights[i] * terms[i].item();
  }
  return make_op<Real>(Tensor<Real>({1}, std::vector<Real>{acc}), terms, [weights](Node<Real>& nd) {
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (wants(nd, i)) nd.inputs[i]->grad_buffer()[0] += weights[i] * nd.grad[0];
  });
}

#define TRIEDIT_INSTANTIATE_AD(R)                                                                        \
  template Var<R> make_op<R>(Tensor<R>, std::vector<Var<R>>, std::function<void(Node<R>&)>);             \
  template void backward<R>(const Var<R>&);                                                              \
  template Var<R> matmul<R>(const Var<R>&, const Var<R>&);                                               \
  template Var<R> linear<R>(const Var<R>&, const Var<R>&, const Var<R>&);                                \
  template Var<R> add<R>(const Var<R>&, const Var<R>&);                                                  \
  template Var<R> sub<R>(const Var<R>&, const Var<R>&);                                                  \
  template Var<R> scale<R>(const Var<R>&, R);                                                            \
  template Var<R> add_row<R>(const Var<R>&, const Var<R>&);                                              \
  template Var<R> gelu<R>(const Var<R>&);                                                                \
  template Var<R> silu<R>(const Var<R>&);                                                                \
  template Var<R> softplus<R>(const Var<R>&);                                                            \
  template Var<R> sigmoid<R>(const Var<R>&);                                                             \
  template Var<R> logit_clamped<R>(const Var<R>&, R);                                                    \
  template Var<R> layer_norm<R>(const Var<R>&, const Var<R>&, const Var<R>&, R);                         \
  template Var<R> attention<R>(const Var<R>&, const Var<R>&, const Var<R>&);                             \
  template Var<R> concat_rows<R>(const Var<R>&, const Var<R>&);                                          \
  template Var<R> slice_rows<R>(const Var<R>&, int, int);                                                \
  template Var<R> gather<R>(const Var<R>&, std::vector<int>, Shape);                                     \
  template Var<R> reshape<R>(const Var<R>&, Shape);                                                      \
  template Var<R> conv2d<R>(const Var<R>&, const Var<R>&, const Var<R>&, int, int);                      \
  template Var<R> upsample_nearest<R>(const Var<R>&, int);                                               \
  template Var<R> mean_squared_error<R>(const Var<R>&, const Var<R>&);                                   \
  template Var<R> mean_abs_error<R>(const Var<R>&, const Var<R>&);                                       \
  template Var<R> masked_mean_abs_error<R>(const Var<R>&, const Var<R>&, const Tensor<R>&);              \
  template Var<R> weighted_sum<R>(const std::vector<Var<R>>&, const std::vector<R>&);

TRIEDIT_INSTANTIATE_AD(float)
TRIEDIT_INSTANTIATE_AD(double)

}  // namespace ad
}  // namespace triedit
