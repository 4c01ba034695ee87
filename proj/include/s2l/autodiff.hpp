#pragma once

// Reverse-mode automatic differentiation over dense arrays.
//
// A Var is a handle to a node in a dynamically built graph. Parameters are
// leaves that require gradients; constants are leaves that do not. Every op
// records a closure that propagates its output gradient into its parents.
// backward() walks the graph in reverse topological order. Leaf gradients
// accumulate across calls; interior gradients are recomputed on each call.

#include <functional>
#include <memory>
#include <vector>

#include "s2l/tensor.hpp"

namespace s2l::ad {

struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  bool leaf = true;

  /// Gradient buffer, zero-allocated on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad_buffer(); }
  Tensor& mutable_grad() { return node_->grad_buffer(); }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }
  double item() const { return node_->value.item(); }
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var parameter(Tensor value);
Var constant(Tensor value);
/// A constant holding a copy of v's current value; cuts the graph.
Var detach(const Var& v);

/// Builds an interior node. `fn` receives the finished node and must add its
/// gradient into every parent that requires one.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn);

/// Propagates d(loss)/d(.) to every reachable node. `loss` must hold exactly
/// one element.
void backward(const Var& loss);

}  // namespace s2l::ad
