#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hila/autograd.hpp"
#include "hila/kernels.hpp"

namespace hila {

enum class Init { trunc_normal, zeros, ones };

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-6;

/// Deterministic initial value for a named parameter. Each parameter draws from its
/// own stream seeded by (seed, name), so values do not depend on creation order.
template <typename T>
Tensor<T> init_tensor(std::uint64_t seed, const std::string& name, const Shape& shape, Init kind);

/// Named, ordered collection of trainable leaves.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  Var<T> create(const std::string& name, const Shape& shape, Init kind);
  // Registers an explicit value (used when converting between precisions or loading).
  Var<T> adopt(const std::string& name, Tensor<T> value);
  // Registers an existing leaf; the store then shares it with the caller.
  Var<T> adopt(const std::string& name, Var<T> leaf);

  const Var<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Var<T>>& vars() const { return vars_; }
  std::int64_t count() const;
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::vector<std::string> names_;
  std::vector<Var<T>> vars_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
struct LinearP {
  Var<T> w, b;
};
template <typename T>
struct NormP {
  Var<T> g, b;
};
template <typename T>
struct ConvP {
  Var<T> w, b;
  kernels::ConvSpec spec;
};

template <typename T>
LinearP<T> make_linear(ParamStore<T>& ps, const std::string& name, std::int64_t din, std::int64_t dout,
                       Init weight_init = Init::trunc_normal);
template <typename T>
NormP<T> make_norm(ParamStore<T>& ps, const std::string& name, std::int64_t d);
template <typename T>
ConvP<T> make_conv(ParamStore<T>& ps, const std::string& name, int k, std::int64_t cin, std::int64_t cout,
                   kernels::ConvSpec spec);

// Looks up existing parameters by the same names the make_* helpers use.
template <typename T>
LinearP<T> get_linear(const ParamStore<T>& ps, const std::string& name);
template <typename T>
NormP<T> get_norm(const ParamStore<T>& ps, const std::string& name);

template <typename T>
Var<T> apply(const LinearP<T>& p, const Var<T>& x);
template <typename T>
Var<T> apply(const NormP<T>& p, const Var<T>& x);
template <typename T>
Var<T> apply(const ConvP<T>& p, const Var<T>& x);

}  // namespace hila
