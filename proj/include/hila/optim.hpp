#pragma once

#include <vector>

#include "hila/autograd.hpp"

namespace hila {

template <typename T>
struct AdamWState {
  std::vector<Tensor<T>> m, v;
  long step = 0;
  double lr = 6e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  // Poly schedule: lr * (1 - step/total_steps)^power. total_steps <= 0 keeps lr constant.
  long total_steps = 0;
  double power = 1.0;
  long warmup_steps = 0;  // linear ramp from lr/warmup_steps, multiplied into the poly factor

  double scheduled_lr() const;
};

/// One decoupled-weight-decay Adam update in place. grads[i] pairs with *params[i];
/// moments are allocated on the first call.
template <typename T>
void adamw_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, AdamWState<T>& state);

}  // namespace hila
