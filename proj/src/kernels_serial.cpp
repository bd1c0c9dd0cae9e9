#include "hila/kernels_serial.hpp"

#include <cmath>

namespace hila::kernels::serial {

template <typename T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, bool trans_a, const T* b, bool trans_b,
          T* c, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        s += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, ConvSpec spec) {
  const std::int64_t bn = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  const int k = static_cast<int>(w.dim(0));
  const std::int64_t cout = w.dim(3);
  const std::int64_t oh = conv_out_extent(h, k, spec.stride, spec.padding);
  const std::int64_t ow = conv_out_extent(wd, k, spec.stride, spec.padding);
  Tensor<T> y(Shape{bn, oh, ow, cout});
  for (std::int64_t b = 0; b < bn; ++b)
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox)
        for (std::int64_t co = 0; co < cout; ++co) {
          T s = bias ? (*bias)[co] : T(0);
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const std::int64_t iy = oy * spec.stride - spec.padding + ky;
              const std::int64_t ix = ox * spec.stride - spec.padding + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              if (spec.depthwise) {
                s += x[((b * h + iy) * wd + ix) * cin + co] * w[(ky * k + kx) * cout + co];
              } else {
                for (std::int64_t ci = 0; ci < cin; ++ci)
                  s += x[((b * h + iy) * wd + ix) * cin + ci] * w[((ky * k + kx) * cin + ci) * cout + co];
              }
            }
          y[((b * oh + oy) * ow + ox) * cout + co] = s;
        }
  return y;
}

template <typename T>
Tensor<T> unfold(const Tensor<T>& x, const PatchGeometry& g) {
  const std::int64_t bn = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::int64_t ht = g.out_extent(h), wt = g.out_extent(w);
  Tensor<T> out(Shape{bn, ht * wt, g.slots(), c});
  for (std::int64_t b = 0; b < bn; ++b)
    for (std::int64_t i = 0; i < ht; ++i)
      for (std::int64_t j = 0; j < wt; ++j)
        for (int ky = 0; ky < g.kernel; ++ky)
          for (int kx = 0; kx < g.kernel; ++kx) {
            const std::int64_t y = i * g.stride - g.padding + ky;
            const std::int64_t xx = j * g.stride - g.padding + kx;
            if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
            for (std::int64_t ch = 0; ch < c; ++ch)
              out[(((b * ht + i) * wt + j) * g.slots() + ky * g.kernel + kx) * c + ch] =
                  x[((b * h + y) * w + xx) * c + ch];
          }
  return out;
}

template <typename T>
Tensor<T> fold(const Tensor<T>& patches, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g) {
  const std::int64_t bn = patches.dim(0), c = patches.dim(3);
  const std::int64_t ht = g.out_extent(out_h), wt = g.out_extent(out_w);
  if (patches.dim(1) != ht * wt || patches.dim(2) != g.slots()) throw GeometryError("fold: geometry mismatch");
  Tensor<T> out(Shape{bn, out_h, out_w, c});
  for (std::int64_t b = 0; b < bn; ++b)
    for (std::int64_t i = 0; i < ht; ++i)
      for (std::int64_t j = 0; j < wt; ++j)
        for (int ky = 0; ky < g.kernel; ++ky)
          for (int kx = 0; kx < g.kernel; ++kx) {
            const std::int64_t y = i * g.stride - g.padding + ky;
            const std::int64_t xx = j * g.stride - g.padding + kx;
            if (y < 0 || y >= out_h || xx < 0 || xx >= out_w) continue;
            for (std::int64_t ch = 0; ch < c; ++ch)
              out[((b * out_h + y) * out_w + xx) * c + ch] +=
                  patches[(((b * ht + i) * wt + j) * g.slots() + ky * g.kernel + kx) * c + ch];
          }
  return out;
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::int64_t n = x.dim(-1);
  Tensor<T> y(x.shape());
  for (std::int64_t r = 0; r < x.numel() / n; ++r) {
    T mx = x[r * n];
    for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[r * n + j]);
    T s = 0;
    for (std::int64_t j = 0; j < n; ++j) s += std::exp(x[r * n + j] - mx);
    for (std::int64_t j = 0; j < n; ++j) y[r * n + j] = std::exp(x[r * n + j] - mx) / s;
  }
  return y;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::int64_t d = x.dim(-1);
  Tensor<T> y(x.shape());
  for (std::int64_t r = 0; r < x.numel() / d; ++r) {
    T mean = 0;
    for (std::int64_t j = 0; j < d; ++j) mean += x[r * d + j];
    mean /= T(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) var += (x[r * d + j] - mean) * (x[r * d + j] - mean);
    var /= T(d);
    for (std::int64_t j = 0; j < d; ++j)
      y[r * d + j] = (x[r * d + j] - mean) / std::sqrt(var + eps) * gamma[j] + beta[j];
  }
  return y;
}

#define HILA_INSTANTIATE(T)                                                                                   \
  template void gemm<T>(std::int64_t, std::int64_t, std::int64_t, const T*, bool, const T*, bool, T*, bool); \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, ConvSpec);               \
  template Tensor<T> unfold<T>(const Tensor<T>&, const PatchGeometry&);                                       \
  template Tensor<T> fold<T>(const Tensor<T>&, std::int64_t, std::int64_t, const PatchGeometry&);             \
  template Tensor<T> softmax_lastdim<T>(const Tensor<T>&);                                                    \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);

HILA_INSTANTIATE(float)
HILA_INSTANTIATE(double)
#undef HILA_INSTANTIATE

}  // namespace hila::kernels::serial
