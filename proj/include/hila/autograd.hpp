#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "hila/tensor.hpp"

namespace hila {

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Maps the output cotangent to one cotangent per parent. An empty Tensor means
// "no contribution" (e.g. the parent does not require a gradient).
template <typename T>
using VjpFn = std::function<std::vector<Tensor<T>>(const Tensor<T>&)>;

template <typename T>
struct Node {
  Tensor<T> value;
  std::vector<NodePtr<T>> parents;
  VjpFn<T> vjp;
  bool requires_grad = false;
};

/// Handle to a graph node. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false);

  // Records an op result; the graph edge is dropped when no parent needs a gradient
  // or recording is disabled on this thread.
  static Var from_op(Tensor<T> value, const std::vector<Var>& parents, VjpFn<T> vjp);

  const Tensor<T>& value() const { return node_->value; }
  // Leaves only: optimizers and finite differences mutate parameter values in place.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Node<T>* node() const { return node_.get(); }
  const NodePtr<T>& node_ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  NodePtr<T> node_;
};

/// Result of a backward pass: d(root)/d(leaf) for every requires_grad leaf reached.
template <typename T>
class Gradients {
 public:
  bool contains(const Var<T>& v) const { return grads_.count(v.node()) != 0; }
  // Returns zeros of the leaf's shape when the leaf did not influence the root.
  Tensor<T> at(const Var<T>& v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  template <typename U>
  friend Gradients<U> backward(const Var<U>& root);
  std::unordered_map<const Node<T>*, Tensor<T>> grads_;
};

/// Reverse-mode sweep from a scalar root; visits every node once in reverse topological order.
template <typename T>
Gradients<T> backward(const Var<T>& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every element of x.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h);

/// max|a-b| / max(max|a|, max|b|, min_scale): error relative to the gradient's scale.
template <typename T>
T relative_error(const Tensor<T>& analytic, const Tensor<T>& numeric, T min_scale = T(1e-12));

}  // namespace hila
