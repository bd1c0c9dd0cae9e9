#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "hila/autograd.hpp"
#include "hila/kernels.hpp"

// Differentiable wrappers over the kernels. Each op computes its forward value
// with a kernel and records a pull-back built from the matching adjoint kernel.
namespace hila::ops {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T s);
/// alpha*a + beta*b
template <typename T>
Var<T> axpby(T alpha, const Var<T>& a, T beta, const Var<T>& b);
/// x + bias, bias broadcast over every leading dim of x.
template <typename T>
Var<T> add_lastdim(const Var<T>& x, const Var<T>& bias);

template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x, std::shared_ptr<const std::vector<std::uint8_t>> mask = nullptr);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);
template <typename T>
Var<T> gelu(const Var<T>& x);
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, kernels::ConvSpec spec);

template <typename T>
Var<T> unfold(const Var<T>& x, const PatchGeometry& g);
template <typename T>
Var<T> fold(const Var<T>& patches, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g);
template <typename T>
Var<T> cover_softmax(const Var<T>& logits, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g);
template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::int64_t out_h, std::int64_t out_w);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T>
Var<T> permute(const Var<T>& x, std::vector<int> perm);
template <typename T>
Var<T> concat_lastdim(const std::vector<Var<T>>& xs);
/// Zero-pad a [B,H,W,C] map at the bottom and right.
template <typename T>
Var<T> pad_bottom_right(const Var<T>& x, std::int64_t pad_h, std::int64_t pad_w);
/// Inverse of pad_bottom_right: keep the top-left [h,w] corner.
template <typename T>
Var<T> crop_top_left(const Var<T>& x, std::int64_t h, std::int64_t w);

/// Mean pixelwise cross-entropy of logits [B,H,W,C] against labels (B*H*W ids),
/// skipping ignore_index. An all-ignored batch yields 0 with zero gradient.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::uint8_t>& labels, int ignore_index);

}  // namespace hila::ops
