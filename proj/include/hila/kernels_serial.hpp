#pragma once

#include "hila/kernels.hpp"

// Single-threaded reference implementations of the hot kernels, written as the
// plainest possible loop nests. Tests compare the parallel kernels against these;
// bench/ times both.
namespace hila::kernels::serial {

template <typename T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, bool trans_a, const T* b,
          bool trans_b, T* c, bool accumulate);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, ConvSpec spec);

template <typename T>
Tensor<T> unfold(const Tensor<T>& x, const PatchGeometry& g);

// Scatter formulation (the parallel kernel gathers).
template <typename T>
Tensor<T> fold(const Tensor<T>& patches, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

}  // namespace hila::kernels::serial
