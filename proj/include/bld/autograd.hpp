#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "bld/tensor.hpp"

// Minimal reverse-mode differentiation over float tensors. Nodes record their
// inputs and a backward closure only when some input requires a gradient, so
// pure inference through the same ops builds no graph.

namespace bld::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// Adds g into grad, allocating it on first use.
  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad();
  const Shape& shape() const { return node_->value.shape(); }
  bool defined() const { return static_cast<bool>(node_); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

  /// Builds an op result. The backward closure is kept only when an input needs gradients.
  static Var make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

 private:
  std::shared_ptr<Node> node_;
};

/// Runs backpropagation from a scalar. Leaf gradients accumulate; the graph is released.
void backward(const Var& loss);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var silu(const Var& x);
Var relu(const Var& x);
Var tanh(const Var& x);
Var exp(const Var& x);

// Layers.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var linear(const Var& x, const Var& w, const Var& b);
Var add_channel_bias(const Var& x, const Var& v);  // x [N,C,H,W] + v [N,C]
Var upsample2x(const Var& x);
Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& x, int begin, int count);
Var global_avg_pool(const Var& x);  // [N,C,H,W] -> [N,C]
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups);
Var flatten(const Var& x);          // [N,...] -> [N,K]
Var gather_rows(const Var& table, const std::vector<int>& rows);
Var l2_normalize_rows(const Var& x);
Var matmul_nt(const Var& a, const Var& b);  // a [N,D] * b[K,D]^T

// Losses; each returns a scalar [1].
Var weighted_mse(const Var& pred, const Tensor& target, const Tensor& weight);
Var mse(const Var& pred, const Tensor& target);
Var gaussian_kl(const Var& mean, const Var& logvar);
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

}  // namespace bld::ag
