#include "hila/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "hila/mac_counter.hpp"

namespace hila::kernels {

namespace {

// Below this many multiply-adds a kernel runs on the calling thread only.
constexpr std::int64_t kParallelWork = 1 << 15;

template <typename T>
void gemm_impl(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, bool trans_a, const T* b,
               bool trans_b, T* c, bool accumulate, bool parallel) {
  std::vector<T> a_t;
  if (trans_a) {
    a_t.resize(static_cast<std::size_t>(m * k));
    for (std::int64_t p = 0; p < k; ++p)
      for (std::int64_t i = 0; i < m; ++i) a_t[i * k + p] = a[p * m + i];
    a = a_t.data();
  }
  const bool par = parallel && m * n * k > kParallelWork && m > 1;
  if (!trans_b) {
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < m; ++i) {
      T* ci = c + i * n;
      if (!accumulate) std::fill(ci, ci + n, T(0));
      const T* ai = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = ai[p];
        const T* bp = b + p * n;
#pragma omp simd
        for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else {
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < m; ++i) {
      T* ci = c + i * n;
      const T* ai = a + i * k;
      for (std::int64_t j = 0; j < n; ++j) {
        const T* bj = b + j * k;
        T s = 0;
#pragma omp simd reduction(+ : s)
        for (std::int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        ci[j] = accumulate ? ci[j] + s : s;
      }
    }
  }
}

Shape broadcast_batch(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("batch dims " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Flat offset into a (possibly lower-rank, broadcast) batch shape for each output batch index.
std::vector<std::int64_t> batch_offsets(const Shape& out, const Shape& in) {
  const std::int64_t total = shape_numel(out);
  std::vector<std::int64_t> offs(static_cast<std::size_t>(total));
  const std::size_t r = out.size();
  const std::size_t lead = r - in.size();
  for (std::int64_t flat = 0; flat < total; ++flat) {
    std::int64_t rem = flat;
    std::int64_t off = 0;
    std::int64_t stride = 1;
    for (std::size_t ii = r; ii-- > 0;) {
      const std::int64_t idx = rem % out[ii];
      rem /= out[ii];
      if (ii >= lead) {
        const std::int64_t e = in[ii - lead];
        off += (e == 1 ? 0 : idx) * stride;
        stride *= e;
      }
    }
    offs[static_cast<std::size_t>(flat)] = off;
  }
  return offs;
}

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

}  // namespace

template <typename T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, bool trans_a, const T* b,
          bool trans_b, T* c, bool accumulate) {
  gemm_impl(m, n, k, a, trans_a, b, trans_b, c, accumulate, true);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = trans_a ? a.dim(-1) : a.dim(-2);
  const std::int64_t ka = trans_a ? a.dim(-2) : a.dim(-1);
  const std::int64_t kb = trans_b ? b.dim(-1) : b.dim(-2);
  const std::int64_t n = trans_b ? b.dim(-2) : b.dim(-1);
  if (ka != kb) {
    throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape out_shape = broadcast_batch(batch_a, batch_b);
  const std::int64_t batches = shape_numel(out_shape);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  mac::add(static_cast<std::uint64_t>(batches * m * n * ka));

  const std::int64_t a_mat = a.dim(-1) * a.dim(-2);
  const std::int64_t b_mat = b.dim(-1) * b.dim(-2);
  const Shape out_batch(out_shape.begin(), out_shape.end() - 2);
  if (batches == 1) {
    gemm_impl(m, n, ka, a.ptr(), trans_a, b.ptr(), trans_b, out.ptr(), false, true);
    return out;
  }
  const auto off_a = batch_offsets(out_batch, batch_a);
  const auto off_b = batch_offsets(out_batch, batch_b);
  const bool par = batches * m * n * ka > kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::int64_t t = 0; t < batches; ++t) {
    gemm_impl(m, n, ka, a.ptr() + off_a[t] * a_mat, trans_a, b.ptr() + off_b[t] * b_mat, trans_b,
              out.ptr() + t * m * n, false, false);
  }
  return out;
}

template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& t, const Shape& target) {
  if (t.shape() == target) return t;
  if (target.size() > t.shape().size()) throw ShapeError("reduce_to_shape: target rank too large");
  Tensor<T> out(target);
  const Shape& s = t.shape();
  const std::size_t r = s.size();
  const std::size_t lead = r - target.size();
  for (std::size_t i = lead; i < r; ++i) {
    const auto e = target[i - lead];
    if (e != 1 && e != s[i]) throw ShapeError("cannot reduce " + shape_str(s) + " to " + shape_str(target));
  }
  for (std::int64_t flat = 0; flat < t.numel(); ++flat) {
    std::int64_t rem = flat;
    std::int64_t off = 0;
    std::int64_t stride = 1;
    for (std::size_t ii = r; ii-- > 0;) {
      const std::int64_t idx = rem % s[ii];
      rem /= s[ii];
      if (ii >= lead) {
        const std::int64_t e = target[ii - lead];
        off += (e == 1 ? 0 : idx) * stride;
        stride *= e;
      }
    }
    out[off] += t[flat];
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const std::int64_t din = w.dim(0);
  const std::int64_t dout = w.dim(1);
  const std::int64_t rows = x.numel() / std::max<std::int64_t>(din, 1);
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<T> out(out_shape);
  mac::add(static_cast<std::uint64_t>(rows * din * dout));
  gemm_impl(rows, dout, din, x.ptr(), false, w.ptr(), false, out.ptr(), false, true);
  if (bias) {
    if (bias->numel() != dout) throw ShapeError("linear: bias size mismatch");
    const T* bp = bias->ptr();
    T* o = out.ptr();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < dout; ++j) o[r * dout + j] += bp[j];
  }
  return out;
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw ShapeError("softmax over empty last dim");
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  const std::int64_t period = static_cast<std::int64_t>(mask.size());
  if (period && period % n != 0) throw ShapeError("softmax mask period must be a multiple of the row length");
  Tensor<T> y(x.shape());
  const T* xp = x.ptr();
  T* yp = y.ptr();
#pragma omp parallel for schedule(static) if (rows * n > kParallelWork)
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xp + r * n;
    T* yr = yp + r * n;
    const std::uint8_t* mr = period ? mask.data() + (r * n) % period : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::int64_t j = 0; j < n; ++j)
      if (!mr || mr[j]) mx = std::max(mx, xr[j]);
    T sum = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      const T e = (!mr || mr[j]) ? std::exp(xr[j] - mx) : T(0);
      yr[j] = e;
      sum += e;
    }
    const T inv = sum > 0 ? T(1) / sum : T(0);
    for (std::int64_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  return y;
}

template <typename T>
Tensor<T> softmax_lastdim_backward(const Tensor<T>& y, const Tensor<T>& gy) {
  const std::int64_t n = y.dim(-1);
  const std::int64_t rows = y.numel() / n;
  Tensor<T> gx(y.shape());
#pragma omp parallel for schedule(static) if (rows * n > kParallelWork)
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* yr = y.ptr() + r * n;
    const T* gr = gy.ptr() + r * n;
    T dot = 0;
    for (std::int64_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
    T* out = gx.ptr() + r * n;
    for (std::int64_t j = 0; j < n; ++j) out[j] = yr[j] * (gr[j] - dot);
  }
  return gx;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     LayerNormCache<T>* cache) {
  const std::int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm: affine size mismatch");
  const std::int64_t rows = x.numel() / d;
  Tensor<T> y(x.shape());
  if (cache) {
    cache->mean.assign(static_cast<std::size_t>(rows), T(0));
    cache->rstd.assign(static_cast<std::size_t>(rows), T(0));
  }
#pragma omp parallel for schedule(static) if (rows * d > kParallelWork)
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * d;
    T mean = 0;
    for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    T* yr = y.ptr() + r * d;
    for (std::int64_t j = 0; j < d; ++j) yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
    if (cache) {
      cache->mean[r] = mean;
      cache->rstd[r] = rstd;
    }
  }
  return y;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const LayerNormCache<T>& cache,
                         const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta) {
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  if (gx) {
    *gx = Tensor<T>(x.shape());
#pragma omp parallel for schedule(static) if (rows * d > kParallelWork)
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = x.ptr() + r * d;
      const T* gr = gy.ptr() + r * d;
      const T mean = cache.mean[r];
      const T rstd = cache.rstd[r];
      T sum_g = 0;
      T sum_gx = 0;
      for (std::int64_t j = 0; j < d; ++j) {
        const T g = gr[j] * gamma[j];
        sum_g += g;
        sum_gx += g * (xr[j] - mean) * rstd;
      }
      sum_g /= T(d);
      sum_gx /= T(d);
      T* out = gx->ptr() + r * d;
      for (std::int64_t j = 0; j < d; ++j) {
        const T xhat = (xr[j] - mean) * rstd;
        out[j] = rstd * (gr[j] * gamma[j] - sum_g - xhat * sum_gx);
      }
    }
  }
  if (ggamma || gbeta) {
    Tensor<T> gg(Shape{d});
    Tensor<T> gb(Shape{d});
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = x.ptr() + r * d;
      const T* gr = gy.ptr() + r * d;
      const T mean = cache.mean[r];
      const T rstd = cache.rstd[r];
      for (std::int64_t j = 0; j < d; ++j) {
        gg[j] += gr[j] * (xr[j] - mean) * rstd;
        gb[j] += gr[j];
      }
    }
    if (ggamma) *ggamma = std::move(gg);
    if (gbeta) *gbeta = std::move(gb);
  }
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::int64_t n = x.numel();
#pragma omp parallel for schedule(static) if (n > kParallelWork)
  for (std::int64_t i = 0; i < n; ++i) y[i] = gelu_scalar(x[i]);
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& gy) {
  Tensor<T> gx(x.shape());
  const std::int64_t n = x.numel();
  const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
#pragma omp parallel for schedule(static) if (n > kParallelWork)
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * v * v) * inv_sqrt_2pi;
    gx[i] = gy[i] * (cdf + v * pdf);
  }
  return gx;
}

std::int64_t conv_out_extent(std::int64_t in, int k, int stride, int padding) {
  if (k < 1 || stride < 1) throw ShapeError("conv kernel and stride must be >= 1");
  const std::int64_t span = in + 2 * padding - k;
  if (span < 0) {
    throw ShapeError("conv output extent non-positive: input " + std::to_string(in) + ", kernel " +
                     std::to_string(k) + ", padding " + std::to_string(padding));
  }
  return span / stride + 1;
}

namespace {

struct ConvDims {
  std::int64_t b, h, w, cin, oh, ow, cout;
  int k;
};

template <typename T>
ConvDims conv_dims(const Shape& xs, const Shape& ws, ConvSpec spec) {
  if (xs.size() != 4 || ws.size() != 4) throw ShapeError("conv2d expects x [B,H,W,C] and w [k,k,Cin,Cout]");
  if (ws[0] != ws[1]) throw ShapeError("conv2d expects a square kernel, got " + shape_str(ws));
  ConvDims d{xs[0], xs[1], xs[2], xs[3], 0, 0, ws[3], static_cast<int>(ws[0])};
  if (spec.depthwise) {
    if (ws[2] != 1 || ws[3] != d.cin) {
      throw ShapeError("depthwise conv weight " + shape_str(ws) + " incompatible with " + std::to_string(d.cin) +
                       " channels");
    }
  } else if (ws[2] != d.cin) {
    throw ShapeError("conv2d weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  }
  d.oh = conv_out_extent(d.h, d.k, spec.stride, spec.padding);
  d.ow = conv_out_extent(d.w, d.k, spec.stride, spec.padding);
  return d;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, ConvSpec spec) {
  const ConvDims d = conv_dims<T>(x.shape(), w.shape(), spec);
  Tensor<T> y(Shape{d.b, d.oh, d.ow, d.cout});
  const T* xp = x.ptr();
  const T* wp = w.ptr();
  const std::int64_t work = d.b * d.oh * d.ow * d.k * d.k * (spec.depthwise ? d.cout : d.cin * d.cout);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::int64_t row = 0; row < d.b * d.oh; ++row) {
    const std::int64_t b = row / d.oh;
    const std::int64_t oy = row % d.oh;
    for (std::int64_t ox = 0; ox < d.ow; ++ox) {
      T* out = y.ptr() + ((b * d.oh + oy) * d.ow + ox) * d.cout;
      if (bias) std::copy(bias->ptr(), bias->ptr() + d.cout, out);
      for (int ky = 0; ky < d.k; ++ky) {
        const std::int64_t iy = oy * spec.stride - spec.padding + ky;
        if (iy < 0 || iy >= d.h) continue;
        for (int kx = 0; kx < d.k; ++kx) {
          const std::int64_t ix = ox * spec.stride - spec.padding + kx;
          if (ix < 0 || ix >= d.w) continue;
          const T* xin = xp + ((b * d.h + iy) * d.w + ix) * d.cin;
          if (spec.depthwise) {
            const T* wk = wp + (ky * d.k + kx) * d.cout;
#pragma omp simd
            for (std::int64_t c = 0; c < d.cout; ++c) out[c] += xin[c] * wk[c];
          } else {
            const T* wk = wp + (ky * d.k + kx) * d.cin * d.cout;
            for (std::int64_t ci = 0; ci < d.cin; ++ci) {
              const T xv = xin[ci];
              const T* wr = wk + ci * d.cout;
#pragma omp simd
              for (std::int64_t co = 0; co < d.cout; ++co) out[co] += xv * wr[co];
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& gy, const Tensor<T>& w, const Shape& x_shape, ConvSpec spec) {
  const ConvDims d = conv_dims<T>(x_shape, w.shape(), spec);
  Tensor<T> gx(x_shape);
  const T* wp = w.ptr();
  const T* gp = gy.ptr();
  const std::int64_t work = d.b * d.oh * d.ow * d.k * d.k * (spec.depthwise ? d.cout : d.cin * d.cout);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::int64_t row = 0; row < d.b * d.h; ++row) {
    const std::int64_t b = row / d.h;
    const std::int64_t iy = row % d.h;
    for (std::int64_t ix = 0; ix < d.w; ++ix) {
      T* out = gx.ptr() + ((b * d.h + iy) * d.w + ix) * d.cin;
      for (int ky = 0; ky < d.k; ++ky) {
        const std::int64_t ty = iy + spec.padding - ky;
        if (ty < 0 || ty % spec.stride != 0) continue;
        const std::int64_t oy = ty / spec.stride;
        if (oy >= d.oh) continue;
        for (int kx = 0; kx < d.k; ++kx) {
          const std::int64_t tx = ix + spec.padding - kx;
          if (tx < 0 || tx % spec.stride != 0) continue;
          const std::int64_t ox = tx / spec.stride;
          if (ox >= d.ow) continue;
          const T* g = gp + ((b * d.oh + oy) * d.ow + ox) * d.cout;
          if (spec.depthwise) {
            const T* wk = wp + (ky * d.k + kx) * d.cout;
            for (std::int64_t c = 0; c < d.cin; ++c) out[c] += wk[c] * g[c];
          } else {
            const T* wk = wp + (ky * d.k + kx) * d.cin * d.cout;
            for (std::int64_t ci = 0; ci < d.cin; ++ci) {
              const T* wr = wk + ci * d.cout;
              T s = 0;
#pragma omp simd reduction(+ : s)
              for (std::int64_t co = 0; co < d.cout; ++co) s += wr[co] * g[co];
              out[ci] += s;
            }
          }
        }
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& x, const Tensor<T>& gy, const Shape& w_shape, ConvSpec spec) {
  const ConvDims d = conv_dims<T>(x.shape(), w_shape, spec);
  Tensor<T> gw(w_shape);
  const T* xp = x.ptr();
  const T* gp = gy.ptr();
  const std::int64_t taps = static_cast<std::int64_t>(d.k) * d.k;
  const std::int64_t items = spec.depthwise ? taps : taps * d.cin;
  const std::int64_t work = d.b * d.oh * d.ow * d.k * d.k * (spec.depthwise ? d.cout : d.cin * d.cout);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::int64_t item = 0; item < items; ++item) {
    const std::int64_t tap = spec.depthwise ? item : item / d.cin;
    const std::int64_t ci = spec.depthwise ? 0 : item % d.cin;
    const int ky = static_cast<int>(tap / d.k);
    const int kx = static_cast<int>(tap % d.k);
    T* acc = gw.ptr() + (spec.depthwise ? tap * d.cout : (tap * d.cin + ci) * d.cout);
    for (std::int64_t b = 0; b < d.b; ++b) {
      for (std::int64_t oy = 0; oy < d.oh; ++oy) {
        const std::int64_t iy = oy * spec.stride - spec.padding + ky;
        if (iy < 0 || iy >= d.h) continue;
        for (std::int64_t ox = 0; ox < d.ow; ++ox) {
          const std::int64_t ix = ox * spec.stride - spec.padding + kx;
          if (ix < 0 || ix >= d.w) continue;
          const T* g = gp + ((b * d.oh + oy) * d.ow + ox) * d.cout;
          const T* xin = xp + ((b * d.h + iy) * d.w + ix) * d.cin;
          if (spec.depthwise) {
#pragma omp simd
            for (std::int64_t c = 0; c < d.cout; ++c) acc[c] += xin[c] * g[c];
          } else {
            const T xv = xin[ci];
#pragma omp simd
            for (std::int64_t co = 0; co < d.cout; ++co) acc[co] += xv * g[co];
          }
        }
      }
    }
  }
  return gw;
}

template <typename T>
Tensor<T> sum_to_lastdim(const Tensor<T>& gy) {
  const std::int64_t c = gy.dim(-1);
  const std::int64_t rows = gy.numel() / c;
  Tensor<T> out(Shape{c});
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* g = gy.ptr() + r * c;
    for (std::int64_t j = 0; j < c; ++j) out[j] += g[j];
  }
  return out;
}

namespace {

struct WindowDims {
  std::int64_t b, h, w, c, ht, wt;
};

WindowDims window_dims(std::int64_t b, std::int64_t h, std::int64_t w, std::int64_t c, const PatchGeometry& g) {
  if (g.kernel < 1 || g.stride < 1 || g.padding < 0) throw GeometryError("invalid patch geometry");
  return WindowDims{b, h, w, c, g.out_extent(h), g.out_extent(w)};
}

// Patch index range [lo, hi] along one axis whose window covers coordinate y.
inline void covering_range(std::int64_t y, std::int64_t n_patches, const PatchGeometry& g, std::int64_t& lo,
                           std::int64_t& hi) {
  // s*i - p <= y  and  y <= s*i - p + k - 1
  const std::int64_t num_hi = y + g.padding;
  const std::int64_t num_lo = y + g.padding - g.kernel + 1;
  hi = num_hi >= 0 ? num_hi / g.stride : -1;
  lo = num_lo <= 0 ? 0 : (num_lo + g.stride - 1) / g.stride;
  hi = std::min(hi, n_patches - 1);
}

}  // namespace

template <typename T>
Tensor<T> unfold(const Tensor<T>& x, const PatchGeometry& g) {
  if (x.rank() != 4) throw ShapeError("unfold expects [B,H,W,C], got " + shape_str(x.shape()));
  const WindowDims d = window_dims(x.dim(0), x.dim(1), x.dim(2), x.dim(3), g);
  const std::int64_t slots = g.slots();
  Tensor<T> out(Shape{d.b, d.ht * d.wt, slots, d.c});
  const std::int64_t work = d.b * d.ht * d.wt * slots * d.c;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::int64_t bl = 0; bl < d.b * d.ht * d.wt; ++bl) {
    const std::int64_t b = bl / (d.ht * d.wt);
    const std::int64_t l = bl % (d.ht * d.wt);
    const std::int64_t oy = (l / d.wt) * g.stride - g.padding;
    const std::int64_t ox = (l % d.wt) * g.stride - g.padding;
    T* dst = out.ptr() + bl * slots * d.c;
    for (int ky = 0; ky < g.kernel; ++ky) {
      const std::int64_t y = oy + ky;
      for (int kx = 0; kx < g.kernel; ++kx) {
        const std::int64_t xx = ox + kx;
        T* slot = dst + (ky * g.kernel + kx) * d.c;
        if (y < 0 || y >= d.h || xx < 0 || xx >= d.w) continue;
        const T* src = x.ptr() + ((b * d.h + y) * d.w + xx) * d.c;
        std::copy(src, src + d.c, slot);
      }
    }
  }
  return out;
}

namespace {

template <typename T, typename Combine>
Tensor<T> fold_gather(const Tensor<T>& patches, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g,
                      T init, Combine combine) {
  if (patches.rank() != 4) throw ShapeError("fold expects [B,L,k*k,C], got " + shape_str(patches.shape()));
  const WindowDims d = window_dims(patches.dim(0), out_h, out_w, patches.dim(3), g);
  if (patches.dim(1) != d.ht * d.wt || patches.dim(2) != g.slots()) {
    throw GeometryError("fold: patches " + shape_str(patches.shape()) + " inconsistent with output " +
                        std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  const std::int64_t slots = g.slots();
  Tensor<T> out(Shape{d.b, out_h, out_w, d.c});
  const std::int64_t work = patches.numel();
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::int64_t row = 0; row < d.b * d.h; ++row) {
    const std::int64_t b = row / d.h;
    const std::int64_t y = row % d.h;
    std::int64_t i_lo, i_hi;
    covering_range(y, d.ht, g, i_lo, i_hi);
    for (std::int64_t x = 0; x < d.w; ++x) {
      std::int64_t j_lo, j_hi;
      covering_range(x, d.wt, g, j_lo, j_hi);
      T* dst = out.ptr() + ((b * d.h + y) * d.w + x) * d.c;
      bool any = false;
      for (std::int64_t i = i_lo; i <= i_hi; ++i) {
        const std::int64_t ky = y - (i * g.stride - g.padding);
        for (std::int64_t j = j_lo; j <= j_hi; ++j) {
          const std::int64_t kx = x - (j * g.stride - g.padding);
          const T* src = patches.ptr() + ((b * d.ht * d.wt + i * d.wt + j) * slots + ky * g.kernel + kx) * d.c;
          if (!any) {
            std::fill(dst, dst + d.c, init);
            any = true;
          }
          for (std::int64_t c = 0; c < d.c; ++c) dst[c] = combine(dst[c], src[c]);
        }
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> fold(const Tensor<T>& patches, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g) {
  return fold_gather<T>(patches, out_h, out_w, g, T(0), [](T a, T b) { return a + b; });
}

template <typename T>
Tensor<T> fold_max(const Tensor<T>& patches, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g) {
  return fold_gather<T>(patches, out_h, out_w, g, -std::numeric_limits<T>::infinity(),
                        [](T a, T b) { return std::max(a, b); });
}

std::vector<std::uint8_t> slot_valid_mask(std::int64_t h, std::int64_t w, const PatchGeometry& g) {
  const std::int64_t ht = g.out_extent(h);
  const std::int64_t wt = g.out_extent(w);
  const std::int64_t slots = g.slots();
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(ht * wt * slots), 0);
  for (std::int64_t i = 0; i < ht; ++i)
    for (std::int64_t j = 0; j < wt; ++j)
      for (int ky = 0; ky < g.kernel; ++ky)
        for (int kx = 0; kx < g.kernel; ++kx) {
          const std::int64_t y = i * g.stride - g.padding + ky;
          const std::int64_t x = j * g.stride - g.padding + kx;
          mask[static_cast<std::size_t>((i * wt + j) * slots + ky * g.kernel + kx)] =
              (y >= 0 && y < h && x >= 0 && x < w) ? 1 : 0;
        }
  return mask;
}

template <typename T>
Tensor<T> cover_softmax(const Tensor<T>& logits, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g) {
  if (logits.rank() != 3) throw ShapeError("cover_softmax expects [B,L,k*k], got " + shape_str(logits.shape()));
  const std::int64_t b = logits.dim(0);
  const std::int64_t l = logits.dim(1);
  const std::int64_t slots = logits.dim(2);
  const auto valid = slot_valid_mask(out_h, out_w, g);
  if (static_cast<std::int64_t>(valid.size()) != l * slots) {
    throw GeometryError("cover_softmax: logits " + shape_str(logits.shape()) + " inconsistent with lower grid " +
                        std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  const Tensor<T> as_patches = logits.reshaped(Shape{b, l, slots, 1});
  // Per-pixel max over its covering slots keeps exp() in range; the shift cancels
  // in the ratio because every slot of a pixel shares it.
  const Tensor<T> shift = unfold(fold_max(as_patches, out_h, out_w, g), g);
  Tensor<T> e(Shape{b, l, slots, 1});
  const std::int64_t per = l * slots;
  for (std::int64_t i = 0; i < e.numel(); ++i) {
    e[i] = valid[static_cast<std::size_t>(i % per)] ? std::exp(as_patches[i] - shift[i]) : T(0);
  }
  // Sum exps across overlapping windows, then scatter the sums back into slots.
  Tensor<T> denom = unfold(fold(e, out_h, out_w, g), g);
  for (std::int64_t i = 0; i < denom.numel(); ++i)
    if (denom[i] == T(0)) denom[i] = T(1);
  Tensor<T> w(Shape{b, l, slots});
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = e[i] / denom[i];
  return w;
}

template <typename T>
Tensor<T> cover_softmax_backward(const Tensor<T>& w, const Tensor<T>& gw, std::int64_t out_h, std::int64_t out_w,
                                 const PatchGeometry& g) {
  const std::int64_t b = w.dim(0);
  const std::int64_t l = w.dim(1);
  const std::int64_t slots = w.dim(2);
  Tensor<T> wg(Shape{b, l, slots, 1});
  for (std::int64_t i = 0; i < wg.numel(); ++i) wg[i] = w[i] * gw[i];
  const Tensor<T> pixel_dot = unfold(fold(wg, out_h, out_w, g), g);
  Tensor<T> gx(Shape{b, l, slots});
  for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] = w[i] * (gw[i] - pixel_dot[i]);
  return gx;
}

namespace {

struct Lerp {
  std::int64_t i0, i1;
  double w0, w1;
};

std::vector<Lerp> lerp_table(std::int64_t in, std::int64_t out) {
  std::vector<Lerp> t(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    const double f = src - static_cast<double>(i0);
    t[static_cast<std::size_t>(o)] = Lerp{i0, i1, 1.0 - f, f};
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  if (x.rank() != 4) throw ShapeError("bilinear_resize expects [B,H,W,C]");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize output must be at least 1x1");
  const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h == out_h && w == out_w) return x;
  const auto ty = lerp_table(h, out_h);
  const auto tx = lerp_table(w, out_w);
  Tensor<T> y(Shape{b, out_h, out_w, c});
#pragma omp parallel for schedule(static) if (y.numel() > kParallelWork)
  for (std::int64_t row = 0; row < b * out_h; ++row) {
    const std::int64_t bi = row / out_h;
    const Lerp& ly = ty[static_cast<std::size_t>(row % out_h)];
    for (std::int64_t ox = 0; ox < out_w; ++ox) {
      const Lerp& lx = tx[static_cast<std::size_t>(ox)];
      const T* p00 = x.ptr() + ((bi * h + ly.i0) * w + lx.i0) * c;
      const T* p01 = x.ptr() + ((bi * h + ly.i0) * w + lx.i1) * c;
      const T* p10 = x.ptr() + ((bi * h + ly.i1) * w + lx.i0) * c;
      const T* p11 = x.ptr() + ((bi * h + ly.i1) * w + lx.i1) * c;
      const T w00 = T(ly.w0 * lx.w0), w01 = T(ly.w0 * lx.w1), w10 = T(ly.w1 * lx.w0), w11 = T(ly.w1 * lx.w1);
      T* out = y.ptr() + (row * out_w + ox) * c;
      for (std::int64_t ch = 0; ch < c; ++ch)
        out[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
    }
  }
  return y;
}

template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& gy, std::int64_t in_h, std::int64_t in_w) {
  const std::int64_t b = gy.dim(0), out_h = gy.dim(1), out_w = gy.dim(2), c = gy.dim(3);
  if (in_h == out_h && in_w == out_w) return gy;
  const auto ty = lerp_table(in_h, out_h);
  const auto tx = lerp_table(in_w, out_w);
  Tensor<T> gx(Shape{b, in_h, in_w, c});
#pragma omp parallel for schedule(static) if (gy.numel() > kParallelWork)
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const Lerp& ly = ty[static_cast<std::size_t>(oy)];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const Lerp& lx = tx[static_cast<std::size_t>(ox)];
        const T* g = gy.ptr() + ((bi * out_h + oy) * out_w + ox) * c;
        T* p00 = gx.ptr() + ((bi * in_h + ly.i0) * in_w + lx.i0) * c;
        T* p01 = gx.ptr() + ((bi * in_h + ly.i0) * in_w + lx.i1) * c;
        T* p10 = gx.ptr() + ((bi * in_h + ly.i1) * in_w + lx.i0) * c;
        T* p11 = gx.ptr() + ((bi * in_h + ly.i1) * in_w + lx.i1) * c;
        const T w00 = T(ly.w0 * lx.w0), w01 = T(ly.w0 * lx.w1), w10 = T(ly.w1 * lx.w0), w11 = T(ly.w1 * lx.w1);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          p00[ch] += w00 * g[ch];
          p01[ch] += w01 * g[ch];
          p10[ch] += w10 * g[ch];
          p11[ch] += w11 * g[ch];
        }
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r || r > 5) throw ShapeError("permute: bad permutation");
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
  std::vector<std::int64_t> strides(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  Tensor<T> y(out_shape);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  for (std::int64_t flat = 0; flat < y.numel(); ++flat) {
    std::int64_t off = 0;
    for (int i = 0; i < r; ++i) off += idx[i] * strides[i];
    y[flat] = x[off];
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return y;
}

#define HILA_INSTANTIATE(T)                                                                                   \
  template void gemm<T>(std::int64_t, std::int64_t, std::int64_t, const T*, bool, const T*, bool, T*, bool); \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, bool, bool);                              \
  template Tensor<T> reduce_to_shape<T>(const Tensor<T>&, const Shape&);                                      \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                         \
  template Tensor<T> softmax_lastdim<T>(const Tensor<T>&, std::span<const std::uint8_t>);                     \
  template Tensor<T> softmax_lastdim_backward<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, LayerNormCache<T>*); \
  template void layer_norm_backward<T>(const Tensor<T>&, const Tensor<T>&, const LayerNormCache<T>&,         \
                                       const Tensor<T>&, Tensor<T>*, Tensor<T>*, Tensor<T>*);                 \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                               \
  template Tensor<T> gelu_backward<T>(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, ConvSpec);               \
  template Tensor<T> conv2d_backward_input<T>(const Tensor<T>&, const Tensor<T>&, const Shape&, ConvSpec);    \
  template Tensor<T> conv2d_backward_weight<T>(const Tensor<T>&, const Tensor<T>&, const Shape&, ConvSpec);   \
  template Tensor<T> sum_to_lastdim<T>(const Tensor<T>&);                                                     \
  template Tensor<T> unfold<T>(const Tensor<T>&, const PatchGeometry&);                                       \
  template Tensor<T> fold<T>(const Tensor<T>&, std::int64_t, std::int64_t, const PatchGeometry&);             \
  template Tensor<T> fold_max<T>(const Tensor<T>&, std::int64_t, std::int64_t, const PatchGeometry&);         \
  template Tensor<T> cover_softmax<T>(const Tensor<T>&, std::int64_t, std::int64_t, const PatchGeometry&);    \
  template Tensor<T> cover_softmax_backward<T>(const Tensor<T>&, const Tensor<T>&, std::int64_t, std::int64_t, \
                                               const PatchGeometry&);                                         \
  template Tensor<T> bilinear_resize<T>(const Tensor<T>&, std::int64_t, std::int64_t);                        \
  template Tensor<T> bilinear_resize_backward<T>(const Tensor<T>&, std::int64_t, std::int64_t);               \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);

HILA_INSTANTIATE(float)
HILA_INSTANTIATE(double)
#undef HILA_INSTANTIATE

}  // namespace hila::kernels
