#include "hila/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace hila {

namespace {

constexpr double kScaleFloor = 1e-6;

template <typename T>
std::vector<Var<T>> make_leaves(const std::vector<Tensor<T>>& inputs) {
  std::vector<Var<T>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.emplace_back(t, true);
  return leaves;
}

}  // namespace

template <typename T>
GradCheckResult grad_check(const std::function<Var<T>(const std::vector<Var<T>>&)>& fn,
                           const std::vector<Tensor<T>>& inputs, T h) {
  auto leaves = make_leaves(inputs);
  auto grads = backward(fn(leaves));
  std::vector<Tensor<T>> analytic, numeric;
  double global = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensor<T>& probe) {
      NoGradGuard guard;
      std::vector<Var<T>> vs;
      for (std::size_t j = 0; j < inputs.size(); ++j) vs.emplace_back(j == i ? probe : inputs[j], false);
      return fn(vs).value().item();
    };
    analytic.push_back(grads.at(leaves[i]));
    numeric.push_back(finite_diff_grad<T>(f, inputs[i], h));
    for (std::int64_t e = 0; e < analytic.back().numel(); ++e)
      global = std::max({global, std::abs(double(analytic.back()[e])), std::abs(double(numeric.back()[e]))});
  }
  // An input whose exact gradient vanishes would otherwise compare difference-quotient
  // noise against itself; its scale is floored relative to the largest gradient.
  const T floor = static_cast<T>(kScaleFloor * std::max(global, 1e-12));
  GradCheckResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const double err = relative_error(analytic[i], numeric[i], floor);
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_input = i;
    }
  }
  return res;
}

template <typename T>
GradCheckResult grad_check_sampled(const std::function<Var<T>(const std::vector<Var<T>>&)>& fn,
                                   const std::vector<Tensor<T>>& inputs,
                                   const std::vector<std::pair<std::size_t, std::int64_t>>& probes, T h) {
  auto leaves = make_leaves(inputs);
  auto grads = backward(fn(leaves));
  std::vector<Tensor<T>> analytic;
  for (const auto& l : leaves) analytic.push_back(grads.at(l));

  std::vector<T> a, n;
  std::vector<Tensor<T>> work = inputs;
  auto eval = [&]() {
    NoGradGuard guard;
    std::vector<Var<T>> vs;
    for (const auto& t : work) vs.emplace_back(t, false);
    return fn(vs).value().item();
  };
  for (auto [i, e] : probes) {
    const T orig = work[i][e];
    work[i][e] = orig + h;
    const T fp = eval();
    work[i][e] = orig - h;
    const T fm = eval();
    work[i][e] = orig;
    a.push_back(analytic[i][e]);
    n.push_back((fp - fm) / (T(2) * h));
  }
  const auto count = static_cast<std::int64_t>(a.size());
  GradCheckResult res;
  res.max_rel_error = relative_error(Tensor<T>(Shape{count}, a), Tensor<T>(Shape{count}, n));
  return res;
}

template GradCheckResult grad_check<float>(const std::function<Var<float>(const std::vector<Var<float>>&)>&,
                                           const std::vector<Tensor<float>>&, float);
template GradCheckResult grad_check<double>(const std::function<Var<double>(const std::vector<Var<double>>&)>&,
                                            const std::vector<Tensor<double>>&, double);
template GradCheckResult grad_check_sampled<float>(
    const std::function<Var<float>(const std::vector<Var<float>>&)>&, const std::vector<Tensor<float>>&,
    const std::vector<std::pair<std::size_t, std::int64_t>>&, float);
template GradCheckResult grad_check_sampled<double>(
    const std::function<Var<double>(const std::vector<Var<double>>&)>&, const std::vector<Tensor<double>>&,
    const std::vector<std::pair<std::size_t, std::int64_t>>&, double);

}  // namespace hila
