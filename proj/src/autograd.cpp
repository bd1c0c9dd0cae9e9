#include "hila/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace hila {

namespace {
thread_local bool recording = true;
}  // namespace

bool grad_enabled() { return recording; }

NoGradGuard::NoGradGuard() : previous_(recording) { recording = false; }
NoGradGuard::~NoGradGuard() { recording = previous_; }

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
Var<T> Var<T>::from_op(Tensor<T> value, const std::vector<Var>& parents, VjpFn<T> vjp) {
  Var out(std::move(value), false);
  if (!recording) return out;
  const bool needs = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  if (!needs) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (const auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->vjp = std::move(vjp);
  return out;
}

template <typename T>
Tensor<T> Gradients<T>::at(const Var<T>& v) const {
  auto it = grads_.find(v.node());
  if (it == grads_.end()) return Tensor<T>(v.shape());
  return it->second;
}

namespace {

template <typename T>
void accumulate(Tensor<T>& into, const Tensor<T>& g) {
  if (into.empty() && into.numel() == 0) {
    into = g;
    return;
  }
  if (into.shape() != g.shape()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match " + shape_str(into.shape()));
  }
  for (std::int64_t i = 0; i < into.numel(); ++i) into[i] += g[i];
}

}  // namespace

template <typename T>
Gradients<T> backward(const Var<T>& root) {
  if (!root) throw ContractError("backward on an empty Var");
  if (root.value().numel() != 1) {
    throw ContractError("backward root must be scalar, got shape " + shape_str(root.shape()));
  }
  Gradients<T> result;
  if (!root.requires_grad()) return result;

  // Iterative post-order DFS gives a deterministic topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node<T>*, Tensor<T>> grads;
  grads[root.node()] = Tensor<T>::full(root.shape(), T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    if (!node->vjp) {
      result.grads_[node] = std::move(found->second);
      grads.erase(found);
      continue;
    }
    const Tensor<T> g = std::move(found->second);
    grads.erase(found);
    auto parent_grads = node->vjp(g);
    for (std::size_t i = 0; i < node->parents.size() && i < parent_grads.size(); ++i) {
      Node<T>* p = node->parents[i].get();
      if (!p->requires_grad || parent_grads[i].numel() == 0) continue;
      if (parent_grads[i].shape() != p->value.shape()) {
        throw ShapeError("vjp produced " + shape_str(parent_grads[i].shape()) + " for parent of shape " +
                         shape_str(p->value.shape()));
      }
      auto slot = grads.find(p);
      if (slot == grads.end()) {
        grads.emplace(p, std::move(parent_grads[i]));
      } else {
        accumulate(slot->second, parent_grads[i]);
      }
    }
  }
  return result;
}

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  if (!(h > T(0))) throw ContractError("finite difference step must be positive");
  Tensor<T> probe = x;
  Tensor<T> g(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T fp = f(probe);
    probe[i] = orig - h;
    const T fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

template <typename T>
T relative_error(const Tensor<T>& analytic, const Tensor<T>& numeric, T min_scale) {
  T diff = 0;
  T scale = 0;
  for (std::int64_t i = 0; i < analytic.numel(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / std::max(scale, min_scale);
}

template class Var<float>;
template class Var<double>;
template class Gradients<float>;
template class Gradients<double>;
template Gradients<float> backward<float>(const Var<float>&);
template Gradients<double> backward<double>(const Var<double>&);
template Tensor<float> finite_diff_grad<float>(const std::function<float(const Tensor<float>&)>&,
                                               const Tensor<float>&, float);
template Tensor<double> finite_diff_grad<double>(const std::function<double(const Tensor<double>&)>&,
                                                 const Tensor<double>&, double);
template float relative_error<float>(const Tensor<float>&, const Tensor<float>&, float);
template double relative_error<double>(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace hila
