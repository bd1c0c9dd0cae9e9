#include "hila/nn.hpp"

#include <cmath>

#include "hila/ops.hpp"
#include "hila/rng.hpp"

namespace hila {

template <typename T>
Tensor<T> init_tensor(std::uint64_t seed, const std::string& name, const Shape& shape, Init kind) {
  switch (kind) {
    case Init::zeros:
      return Tensor<T>(shape);
    case Init::ones:
      return Tensor<T>::full(shape, T(1));
    case Init::trunc_normal:
      break;
  }
  std::uint64_t mix = seed ^ fnv1a(name);
  Rng rng(splitmix64(mix));
  Tensor<T> t(shape);
  for (auto& v : t.data()) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = static_cast<T>(z * kInitStd);
  }
  return t;
}

template <typename T>
Var<T> ParamStore<T>::create(const std::string& name, const Shape& shape, Init kind) {
  return adopt(name, init_tensor<T>(seed_, name, shape, kind));
}

template <typename T>
Var<T> ParamStore<T>::adopt(const std::string& name, Tensor<T> value) {
  if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
  index_[name] = vars_.size();
  names_.push_back(name);
  vars_.emplace_back(std::move(value), true);
  return vars_.back();
}

template <typename T>
Var<T> ParamStore<T>::adopt(const std::string& name, Var<T> leaf) {
  if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
  index_[name] = vars_.size();
  names_.push_back(name);
  vars_.push_back(std::move(leaf));
  return vars_.back();
}

template <typename T>
const Var<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
  return vars_[it->second];
}

template <typename T>
std::int64_t ParamStore<T>::count() const {
  std::int64_t n = 0;
  for (const auto& v : vars_) n += v.value().numel();
  return n;
}

template <typename T>
LinearP<T> make_linear(ParamStore<T>& ps, const std::string& name, std::int64_t din, std::int64_t dout,
                       Init weight_init) {
  return {ps.create(name + ".w", {din, dout}, weight_init), ps.create(name + ".b", {dout}, Init::zeros)};
}

template <typename T>
NormP<T> make_norm(ParamStore<T>& ps, const std::string& name, std::int64_t d) {
  return {ps.create(name + ".g", {d}, Init::ones), ps.create(name + ".b", {d}, Init::zeros)};
}

template <typename T>
ConvP<T> make_conv(ParamStore<T>& ps, const std::string& name, int k, std::int64_t cin, std::int64_t cout,
                   kernels::ConvSpec spec) {
  const std::int64_t wc = spec.depthwise ? 1 : cin;
  return {ps.create(name + ".w", {k, k, wc, cout}, Init::trunc_normal), ps.create(name + ".b", {cout}, Init::zeros),
          spec};
}

template <typename T>
LinearP<T> get_linear(const ParamStore<T>& ps, const std::string& name) {
  return {ps.get(name + ".w"), ps.get(name + ".b")};
}

template <typename T>
NormP<T> get_norm(const ParamStore<T>& ps, const std::string& name) {
  return {ps.get(name + ".g"), ps.get(name + ".b")};
}

template <typename T>
Var<T> apply(const LinearP<T>& p, const Var<T>& x) {
  return ops::linear(x, p.w, p.b);
}

template <typename T>
Var<T> apply(const NormP<T>& p, const Var<T>& x) {
  return ops::layer_norm(x, p.g, p.b, static_cast<T>(kLayerNormEps));
}

template <typename T>
Var<T> apply(const ConvP<T>& p, const Var<T>& x) {
  return ops::conv2d(x, p.w, p.b, p.spec);
}

#define HILA_INSTANTIATE(T)                                                                                   \
  template Tensor<T> init_tensor<T>(std::uint64_t, const std::string&, const Shape&, Init);                   \
  template class ParamStore<T>;                                                                               \
  template LinearP<T> make_linear<T>(ParamStore<T>&, const std::string&, std::int64_t, std::int64_t, Init);   \
  template NormP<T> make_norm<T>(ParamStore<T>&, const std::string&, std::int64_t);                           \
  template ConvP<T> make_conv<T>(ParamStore<T>&, const std::string&, int, std::int64_t, std::int64_t,         \
                                 kernels::ConvSpec);                                                          \
  template LinearP<T> get_linear<T>(const ParamStore<T>&, const std::string&);                                \
  template NormP<T> get_norm<T>(const ParamStore<T>&, const std::string&);                                    \
  template Var<T> apply<T>(const LinearP<T>&, const Var<T>&);                                                 \
  template Var<T> apply<T>(const NormP<T>&, const Var<T>&);                                                   \
  template Var<T> apply<T>(const ConvP<T>&, const Var<T>&);

HILA_INSTANTIATE(float)
HILA_INSTANTIATE(double)
#undef HILA_INSTANTIATE

}  // namespace hila
