// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense tensors.
//
// Ops are coarse (matmul, layer norm, attention, conv, ...) with hand-written
// backward passes. Each op result is a Var that owns its inputs, so the graph
// lives exactly as long as the outputs that reference it. Nodes are only
// recorded when gradients are enabled and at least one input requires grad.
#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "triedit/tensor.hpp"

namespace triedit::ad {

template <typename Real>
struct Node {
  Tensor<Real> value;
  Tensor<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<Real>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<Real>(value.shape());
    return grad;
  }
};

template <typename Real>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<Real>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<Real> value) { return leaf(std::move(value), false); }
  static Var leaf(Tensor<Real> value, bool requires_grad) {
    auto n = std::make_shared<Node<Real>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<Real>& value() const { return node_->value; }
  Tensor<Real>& mutable_value() { return node_->value; }
  const Tensor<Real>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->value.size() > 0; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad() { node_->grad = Tensor<Real>(); }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  Real item() const { return node_->value[0]; }
  Node<Real>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Real>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<Real>> node_;
};

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds an op result. `backward` reads node.grad and accumulates into the
/// grad buffers of node.inputs that require grad.
template <typename Real>
Var<Real> make_op(Tensor<Real> value, std::vector<Var<Real>> inputs, std::function<void(Node<Real>&)> backward);

/// Backpropagates from a scalar root (seed gradient 1).
template <typename Real>
void backward(const Var<Real>& root);

// Linear algebra -------------------------------------------------------------

template <typename Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b);  // [M,K] x [K,N]

/// y = x w + b, with x [M,K], w [K,N], b [N] (b may be undefined).
template <typename Real>
Var<Real> linear(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b);

// Elementwise -----------------------------------------------------------------

template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b);
template <typename Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b);
template <typename Real>
Var<Real> scale(const Var<Real>& a, Real s);
/// x [M,N] + row [N] broadcast over rows.
template <typename Real>
Var<Real> add_row(const Var<Real>& x, const Var<Real>& row);

template <typename Real>
Var<Real> gelu(const Var<Real>& x);
template <typename Real>
Var<Real> silu(const Var<Real>& x);
template <typename Real>
Var<Real> softplus(const Var<Real>& x);
template <typename Real>
Var<Real> sigmoid(const Var<Real>& x);
/// log(x / (1 - x)) after clamping x to [eps, 1 - eps]; zero gradient where clamped.
template <typename Real>
Var<Real> logit_clamped(const Var<Real>& x, Real eps);

// Normalization and attention -----------------------------------------------

/// Row-wise layer normalization of x [M,N] with affine gamma, beta [N].
template <typename Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, Real eps = Real(1e-5));

/// Single-head scaled dot-product attention: softmax(q k^T / sqrt(D)) v.
template <typename Real>
Var<Real> attention(const Var<Real>& q, const Var<Real>& k, const Var<Real>& v);

// Shape manipulation ----------------------------------------------------------

template <typename Real>
Var<Real> concat_rows(const Var<Real>& a, const Var<Real>& b);
template <typename Real>
Var<Real> slice_rows(const Var<Real>& x, int start, int count);
/// out.flat[i] = x.flat[index[i]]; gradient scatters back (adds on repeats).
template <typename Real>
Var<Real> gather(const Var<Real>& x, std::vector<int> index, Shape out_shape);
template <typename Real>
Var<Real> reshape(const Var<Real>& x, Shape shape);

// Images ------------------------------------------------------------------------

/// 2D convolution on a single HWC image. w is [kh, kw, Cin, Cout]; zero padding.
template <typename Real>
Var<Real> conv2d(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b, int stride, int pad);

/// Nearest-neighbour upsampling of an HWC image by an integer factor.
template <typename Real>
Var<Real> upsample_nearest(const Var<Real>& x, int factor);

// Reductions --------------------------------------------------------------------

template <typename Real>
Var<Real> mean_squared_error(const Var<Real>& a, const Var<Real>& b);
template <typename Real>
Var<Real> mean_abs_error(const Var<Real>& a, const Var<Real>& b);
/// sum(mask * |a - b|) / max(sum(mask), 1).
template <typename Real>
Var<Real> masked_mean_abs_error(const Var<Real>& a, const Var<Real>& b, const Tensor<Real>& mask);
/// sum_i weights[i] * terms[i] over scalar terms.
template <typename Real>
Var<Real> weighted_sum(const std::vector<Var<Real>>& terms, const std::vector<Real>& weights);

}  // namespace triedit::ad
