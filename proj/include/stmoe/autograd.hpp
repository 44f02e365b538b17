#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Every op allocates a node that remembers its parents and a closure that
// pushes the output gradient back into the parents. `backward` walks the
// graph in reverse topological order from a scalar root.
//
// Tensors with a leading batch axis N and an expert/channel axis 1 are the
// common currency: ops named *_axis1 treat their input as [N, K, R] with R
// the product of the remaining axes.

#include <functional>
#include <memory>
#include <vector>

#include "stmoe/tensor.hpp"

namespace stmoe::ag {

struct Node;

/// Parent gradients are null when that parent does not require a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::vector<Tensor*>& parent_grads)>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  /// Empty tensor until backward reached this node.
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Value of a single-element tensor.
  double item() const;

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
/// A leaf whose gradient is collected by `backward`.
Var leaf(Tensor value);
/// Builds an op node. `fn` is only attached when some parent requires a gradient.
Var make_op(Tensor value, std::vector<Var> parents, BackwardFn fn);
/// Cuts the graph: same value, no gradient flow.
Var detach(const Var& v);

void backward(const Var& root);

// Elementwise, equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);

// Reductions to a single element (shape {}).
Var sum_all(const Var& a);
Var mean_all(const Var& a);
/// Weighted sum of single-element vars.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

Var reshape(const Var& a, Shape shape);

// Axis-1 structure ops.
Var concat_axis1(const std::vector<Var>& parts);
Var slice_axis1(const Var& a, std::size_t begin, std::size_t count);
/// [N, R...] -> [N, K, R...] by replication.
Var broadcast_axis1(const Var& a, std::size_t k);
/// [N, K, R...] -> [N, R...]
Var sum_axis1(const Var& a);
Var softmax_axis1(const Var& a);
Var log_softmax_axis1(const Var& a);
/// [N, K, R...] -> [N, R...], max-shifted.
Var logsumexp_axis1(const Var& a);
/// [N, K, R...] -> [N, K], mean over the trailing axes.
Var mean_rest(const Var& a);
/// [N, K, R...] -> [N, K], sum over the trailing axes.
Var sum_rest(const Var& a);

// Layers.
/// x [N, Cin, H, W], w [Cout, Cin, k, k] (odd k), b [Cout]; stride 1, zero "same" padding.
Var conv2d_same(const Var& x, const Var& w, const Var& b);
/// x [N, In], w [Out, In], b [Out].
Var linear(const Var& x, const Var& w, const Var& b);

struct BatchNormState {
  const Tensor* running_mean = nullptr;
  const Tensor* running_var = nullptr;
  bool training = false;
  double momentum = 0.1;
  double eps = 1e-5;
  /// Filled in training mode with the updated running statistics.
  Tensor* updated_mean = nullptr;
  Tensor* updated_var = nullptr;
};

/// Per-channel normalization over (N, H, W) of x [N, C, H, W].
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, const BatchNormState& state);

}  // namespace stmoe::ag
