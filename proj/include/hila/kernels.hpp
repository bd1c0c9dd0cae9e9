#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hila/tensor.hpp"

// Forward and adjoint numerical kernels. Everything here is OpenMP-parallel over
// independent outputs: each output element is produced by exactly one thread with
// a fixed summation order, so results do not depend on the thread count.
// Straightforward serial versions of the hot kernels live in kernels_serial.hpp.
namespace hila::kernels {

/// C[M,N] = op(A) * op(B) (+ C if accumulate). op(A) is MxK; stored KxM when trans_a.
template <typename T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, bool trans_a, const T* b,
          bool trans_b, T* c, bool accumulate);

/// Batched matrix product over the last two dims with numpy-style broadcasting of
/// the leading dims. trans_a/trans_b transpose the last two dims of the operand.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false);

/// Sum `t` down to `target` shape (reverse of broadcasting over leading dims).
template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& t, const Shape& target);

/// y = x @ w + bias over the last dim of x. w is [din, dout].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias);

// `mask`, when non-empty, is a keep-flag per element repeating with period
// mask.size(); masked entries get probability exactly 0.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x, std::span<const std::uint8_t> mask = {});
template <typename T>
Tensor<T> softmax_lastdim_backward(const Tensor<T>& y, const Tensor<T>& gy);

template <typename T>
struct LayerNormCache {
  std::vector<T> mean;
  std::vector<T> rstd;
};
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     LayerNormCache<T>* cache = nullptr);
template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const LayerNormCache<T>& cache,
                         const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta);

template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& gy);

struct ConvSpec {
  int stride = 1;
  int padding = 0;
  bool depthwise = false;
};
std::int64_t conv_out_extent(std::int64_t in, int k, int stride, int padding);

/// x [B,H,W,Cin], w [k,k,Cin,Cout] (depthwise: [k,k,1,C]), bias [Cout] or null.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, ConvSpec spec);
template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& gy, const Tensor<T>& w, const Shape& x_shape, ConvSpec spec);
template <typename T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& x, const Tensor<T>& gy, const Shape& w_shape, ConvSpec spec);
template <typename T>
Tensor<T> sum_to_lastdim(const Tensor<T>& gy);

/// x [B,H,W,C] -> [B, Ht*Wt, k*k, C]; slots row-major inside the window, out-of-bounds taps zero.
template <typename T>
Tensor<T> unfold(const Tensor<T>& x, const PatchGeometry& g);
/// Adjoint of unfold: [B, Ht*Wt, k*k, C] -> [B,H,W,C], overlapping taps summed.
template <typename T>
Tensor<T> fold(const Tensor<T>& patches, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g);
/// Like fold but taking the max over covering taps (0 where nothing covers).
template <typename T>
Tensor<T> fold_max(const Tensor<T>& patches, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g);

/// 1 for window slots that land inside the lower-level grid, 0 for padding taps.
/// Length Ht*Wt*k*k.
std::vector<std::uint8_t> slot_valid_mask(std::int64_t h, std::int64_t w, const PatchGeometry& g);

/// Softmax over the set of window slots covering each lower-level pixel.
/// logits [B, Ht*Wt, k*k]; padding slots get weight 0; uncovered denominators are 1.
template <typename T>
Tensor<T> cover_softmax(const Tensor<T>& logits, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g);
template <typename T>
Tensor<T> cover_softmax_backward(const Tensor<T>& w, const Tensor<T>& gw, std::int64_t out_h,
                                 std::int64_t out_w, const PatchGeometry& g);

/// align_corners=false bilinear resize of [B,H,W,C].
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w);
template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& gy, std::int64_t in_h, std::int64_t in_w);

/// General axis permutation (rank <= 5).
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);

}  // namespace hila::kernels
