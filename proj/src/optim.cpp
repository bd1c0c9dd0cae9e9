#include "hila/optim.hpp"

#include <cmath>

namespace hila {

template <typename T>
double AdamWState<T>::scheduled_lr() const {
  const double ramp = warmup_steps > 0 ? std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup_steps)) : 1.0;
  if (total_steps <= 0) return lr * ramp;
  const double frac = std::max(0.0, 1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
  return lr * ramp * std::pow(frac, power);
}

template <typename T>
void adamw_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, AdamWState<T>& state) {
  if (params.size() != grads.size()) {
    throw ContractError("adamw: " + std::to_string(params.size()) + " params but " + std::to_string(grads.size()) +
                        " grads");
  }
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw: state was built for a different parameter list");

  const double lr = state.scheduled_lr();
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = grads[i];
    if (g.shape() != p.shape() || state.m[i].shape() != p.shape()) {
      throw ContractError("adamw: gradient " + shape_str(g.shape()) + " for parameter " + shape_str(p.shape()));
    }
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<T>(state.beta1 * m[j] + (1 - state.beta1) * gj);
      v[j] = static_cast<T>(state.beta2 * v[j] + (1 - state.beta2) * gj * gj);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      double pj = p[j] * (1.0 - lr * state.weight_decay);
      pj -= lr * mhat / (std::sqrt(vhat) + state.eps);
      p[j] = static_cast<T>(pj);
    }
  }
}

template struct AdamWState<float>;
template struct AdamWState<double>;
template void adamw_step<float>(const std::vector<Tensor<float>*>&, const std::vector<Tensor<float>>&,
                                AdamWState<float>&);
template void adamw_step<double>(const std::vector<Tensor<double>*>&, const std::vector<Tensor<double>>&,
                                 AdamWState<double>&);

}  // namespace hila
