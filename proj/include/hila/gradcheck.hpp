#pragma once

#include <functional>
#include <vector>

#include "hila/autograd.hpp"

namespace hila {

struct GradCheckResult {
  double max_rel_error = 0;
  // index into the inputs of the worst offender
  std::size_t worst_input = 0;
};

// Compares backward() against central differences for every input tensor.
// `fn` rebuilds the graph from leaf Vars each call.
template <typename T>
GradCheckResult grad_check(const std::function<Var<T>(const std::vector<Var<T>>&)>& fn,
                           const std::vector<Tensor<T>>& inputs, T h);

// Same, restricted to selected flat elements of each input (pairs of input index, element).
template <typename T>
GradCheckResult grad_check_sampled(const std::function<Var<T>(const std::vector<Var<T>>&)>& fn,
                                   const std::vector<Tensor<T>>& inputs,
                                   const std::vector<std::pair<std::size_t, std::int64_t>>& probes, T h);

}  // namespace hila
