#include "hila/ops.hpp"

#include <cmath>

namespace hila::ops {

namespace k = hila::kernels;

namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
Tensor<T> scaled(const Tensor<T>& t, T s) {
  Tensor<T> out(t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = t[i] * s;
  return out;
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return Var<T>::from_op(std::move(out), {a, b}, [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g, g}; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return Var<T>::from_op(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    Tensor<T> ga(g.shape()), gb(g.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      ga[i] = g[i] * b.value()[i];
      gb[i] = g[i] * a.value()[i];
    }
    return std::vector<Tensor<T>>{std::move(ga), std::move(gb)};
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return Var<T>::from_op(scaled(a.value(), s), {a},
                         [s](const Tensor<T>& g) { return std::vector<Tensor<T>>{scaled(g, s)}; });
}

template <typename T>
Var<T> axpby(T alpha, const Var<T>& a, T beta, const Var<T>& b) {
  require_same_shape(a, b, "axpby");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = alpha * a.value()[i] + beta * b.value()[i];
  return Var<T>::from_op(std::move(out), {a, b}, [alpha, beta](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{scaled(g, alpha), scaled(g, beta)};
  });
}

template <typename T>
Var<T> add_lastdim(const Var<T>& x, const Var<T>& bias) {
  const std::int64_t n = x.dim(-1);
  if (bias.value().numel() != n) {
    throw ShapeError("add_lastdim: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += bias.value()[i % n];
  return Var<T>::from_op(std::move(out), {x, bias}, [bias](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{g, k::sum_to_lastdim(g).reshaped(bias.shape())};
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (auto v : x.value().data()) s += v;
  Shape shape = x.shape();
  return Var<T>::from_op(Tensor<T>(Shape{}, {s}), {x}, [shape](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{Tensor<T>::full(shape, g.item())};
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const T n = static_cast<T>(x.value().numel());
  return scale(sum(x), T(1) / n);
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
  Tensor<T> out = k::matmul(a.value(), b.value(), trans_a, trans_b);
  return Var<T>::from_op(std::move(out), {a, b}, [a, b, trans_a, trans_b](const Tensor<T>& g) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    Tensor<T> ga, gb;
    if (a.requires_grad()) {
      Tensor<T> full = trans_a ? k::matmul(bv, g, trans_b, true) : k::matmul(g, bv, false, !trans_b);
      ga = k::reduce_to_shape(full, av.shape());
    }
    if (b.requires_grad()) {
      Tensor<T> full = trans_b ? k::matmul(g, av, true, trans_a) : k::matmul(av, g, !trans_a, false);
      gb = k::reduce_to_shape(full, bv.shape());
    }
    return std::vector<Tensor<T>>{std::move(ga), std::move(gb)};
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Tensor<T> out = k::linear(x.value(), w.value(), b ? &b.value() : nullptr);
  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(b);
  return Var<T>::from_op(std::move(out), parents, [x, w, b](const Tensor<T>& g) {
    const std::int64_t din = w.dim(0);
    const std::int64_t dout = w.dim(1);
    const std::int64_t rows = g.numel() / dout;
    std::vector<Tensor<T>> grads(b ? 3 : 2);
    if (x.requires_grad()) {
      Tensor<T> gx(x.shape());
      k::gemm(rows, din, dout, g.ptr(), false, w.value().ptr(), true, gx.ptr(), false);
      grads[0] = std::move(gx);
    }
    if (w.requires_grad()) {
      Tensor<T> gw(w.shape());
      k::gemm(din, dout, rows, x.value().ptr(), true, g.ptr(), false, gw.ptr(), false);
      grads[1] = std::move(gw);
    }
    if (b && b.requires_grad()) grads[2] = k::sum_to_lastdim(g).reshaped(b.shape());
    return grads;
  });
}

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  std::span<const std::uint8_t> m;
  if (mask) m = *mask;
  Tensor<T> y = k::softmax_lastdim(x.value(), m);
  auto y_saved = std::make_shared<Tensor<T>>(y);
  return Var<T>::from_op(std::move(y), {x}, [y_saved](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{k::softmax_lastdim_backward(*y_saved, g)};
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  auto cache = std::make_shared<k::LayerNormCache<T>>();
  Tensor<T> y = k::layer_norm(x.value(), gamma.value(), beta.value(), eps, cache.get());
  return Var<T>::from_op(std::move(y), {x, gamma, beta}, [x, gamma, beta, cache](const Tensor<T>& g) {
    Tensor<T> gx, gg, gb;
    k::layer_norm_backward(x.value(), gamma.value(), *cache, g, x.requires_grad() ? &gx : nullptr,
                           gamma.requires_grad() ? &gg : nullptr, beta.requires_grad() ? &gb : nullptr);
    if (!gg.empty()) gg = std::move(gg).reshaped(gamma.shape());
    if (!gb.empty()) gb = std::move(gb).reshaped(beta.shape());
    return std::vector<Tensor<T>>{std::move(gx), std::move(gg), std::move(gb)};
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  return Var<T>::from_op(k::gelu(x.value()), {x}, [x](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{k::gelu_backward(x.value(), g)};
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, kernels::ConvSpec spec) {
  Tensor<T> y = k::conv2d(x.value(), w.value(), b ? &b.value() : nullptr, spec);
  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(b);
  return Var<T>::from_op(std::move(y), parents, [x, w, b, spec](const Tensor<T>& g) {
    std::vector<Tensor<T>> grads(b ? 3 : 2);
    if (x.requires_grad()) grads[0] = k::conv2d_backward_input(g, w.value(), x.shape(), spec);
    if (w.requires_grad()) grads[1] = k::conv2d_backward_weight(x.value(), g, w.shape(), spec);
    if (b && b.requires_grad()) grads[2] = k::sum_to_lastdim(g).reshaped(b.shape());
    return grads;
  });
}

template <typename T>
Var<T> unfold(const Var<T>& x, const PatchGeometry& g) {
  const std::int64_t h = x.dim(1), w = x.dim(2);
  return Var<T>::from_op(k::unfold(x.value(), g), {x}, [g, h, w](const Tensor<T>& gy) {
    return std::vector<Tensor<T>>{k::fold(gy, h, w, g)};
  });
}

template <typename T>
Var<T> fold(const Var<T>& patches, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g) {
  return Var<T>::from_op(k::fold(patches.value(), out_h, out_w, g), {patches},
                         [g](const Tensor<T>& gy) { return std::vector<Tensor<T>>{k::unfold(gy, g)}; });
}

template <typename T>
Var<T> cover_softmax(const Var<T>& logits, std::int64_t out_h, std::int64_t out_w, const PatchGeometry& g) {
  Tensor<T> w = k::cover_softmax(logits.value(), out_h, out_w, g);
  auto saved = std::make_shared<Tensor<T>>(w);
  return Var<T>::from_op(std::move(w), {logits}, [saved, out_h, out_w, g](const Tensor<T>& gy) {
    return std::vector<Tensor<T>>{k::cover_softmax_backward(*saved, gy, out_h, out_w, g)};
  });
}

template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::int64_t out_h, std::int64_t out_w) {
  const std::int64_t h = x.dim(1), w = x.dim(2);
  return Var<T>::from_op(k::bilinear_resize(x.value(), out_h, out_w), {x}, [h, w](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{k::bilinear_resize_backward(g, h, w)};
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Shape original = x.shape();
  return Var<T>::from_op(x.value().reshaped(std::move(shape)), {x}, [original](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{g.reshaped(original)};
  });
}

template <typename T>
Var<T> permute(const Var<T>& x, std::vector<int> perm) {
  std::vector<int> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  return Var<T>::from_op(k::permute(x.value(), perm), {x}, [inverse](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{k::permute(g, inverse)};
  });
}

template <typename T>
Var<T> concat_lastdim(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  Shape out_shape = xs[0].shape();
  std::vector<std::int64_t> widths;
  std::int64_t total = 0;
  for (const auto& x : xs) {
    Shape lead(x.shape().begin(), x.shape().end() - 1);
    if (!std::equal(lead.begin(), lead.end(), out_shape.begin()) || x.shape().size() != out_shape.size()) {
      throw ShapeError("concat_lastdim: incompatible shape " + shape_str(x.shape()));
    }
    widths.push_back(x.dim(-1));
    total += x.dim(-1);
  }
  out_shape.back() = total;
  Tensor<T> out(out_shape);
  const std::int64_t rows = out.numel() / total;
  std::int64_t offset = 0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    const auto& v = xs[t].value();
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy(v.ptr() + r * widths[t], v.ptr() + (r + 1) * widths[t], out.ptr() + r * total + offset);
    offset += widths[t];
  }
  std::vector<Shape> shapes;
  for (const auto& x : xs) shapes.push_back(x.shape());
  return Var<T>::from_op(std::move(out), xs, [widths, total, rows, shapes](const Tensor<T>& g) {
    std::vector<Tensor<T>> grads;
    std::int64_t off = 0;
    for (std::size_t t = 0; t < widths.size(); ++t) {
      Tensor<T> gt(shapes[t]);
      for (std::int64_t r = 0; r < rows; ++r)
        std::copy(g.ptr() + r * total + off, g.ptr() + r * total + off + widths[t], gt.ptr() + r * widths[t]);
      off += widths[t];
      grads.push_back(std::move(gt));
    }
    return grads;
  });
}

namespace {

template <typename T>
Tensor<T> copy_corner(const Tensor<T>& src, Shape dst_shape) {
  Tensor<T> dst(std::move(dst_shape));
  const std::int64_t b = dst.dim(0), c = dst.dim(3);
  const std::int64_t h = std::min(src.dim(1), dst.dim(1)), w = std::min(src.dim(2), dst.dim(2));
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t y = 0; y < h; ++y) {
      const T* s = src.ptr() + ((bi * src.dim(1) + y) * src.dim(2)) * c;
      T* d = dst.ptr() + ((bi * dst.dim(1) + y) * dst.dim(2)) * c;
      std::copy(s, s + w * c, d);
    }
  return dst;
}

}  // namespace

template <typename T>
Var<T> pad_bottom_right(const Var<T>& x, std::int64_t pad_h, std::int64_t pad_w) {
  if (pad_h == 0 && pad_w == 0) return x;
  Shape in_shape = x.shape();
  Shape out_shape{in_shape[0], in_shape[1] + pad_h, in_shape[2] + pad_w, in_shape[3]};
  return Var<T>::from_op(copy_corner(x.value(), out_shape), {x}, [in_shape](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{copy_corner(g, in_shape)};
  });
}

template <typename T>
Var<T> crop_top_left(const Var<T>& x, std::int64_t h, std::int64_t w) {
  if (h == x.dim(1) && w == x.dim(2)) return x;
  Shape in_shape = x.shape();
  Shape out_shape{in_shape[0], h, w, in_shape[3]};
  return Var<T>::from_op(copy_corner(x.value(), out_shape), {x}, [in_shape](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{copy_corner(g, in_shape)};
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::uint8_t>& labels, int ignore_index) {
  const std::int64_t c = logits.dim(-1);
  const std::int64_t pixels = logits.value().numel() / c;
  if (static_cast<std::int64_t>(labels.size()) != pixels) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(pixels) +
                     " pixels");
  }
  auto probs = std::make_shared<Tensor<T>>(k::softmax_lastdim(logits.value()));
  std::int64_t counted = 0;
  T loss = 0;
  for (std::int64_t p = 0; p < pixels; ++p) {
    const int y = labels[static_cast<std::size_t>(p)];
    if (y == ignore_index) continue;
    if (y >= c) throw DataError("label " + std::to_string(y) + " out of range for " + std::to_string(c) + " classes");
    // log-softmax computed directly for accuracy when the probability underflows
    const T* lr = logits.value().ptr() + p * c;
    T mx = lr[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, lr[j]);
    T s = 0;
    for (std::int64_t j = 0; j < c; ++j) s += std::exp(lr[j] - mx);
    loss += std::log(s) + mx - lr[y];
    ++counted;
  }
  const T value = counted ? loss / T(counted) : T(0);
  auto labels_copy = std::make_shared<std::vector<std::uint8_t>>(labels);
  return Var<T>::from_op(Tensor<T>(Shape{}, {value}), {logits},
                         [probs, labels_copy, counted, c, pixels, ignore_index](const Tensor<T>& g) {
                           Tensor<T> gl(probs->shape());
                           if (counted == 0) return std::vector<Tensor<T>>{std::move(gl)};
                           const T s = g.item() / T(counted);
                           for (std::int64_t p = 0; p < pixels; ++p) {
                             const int y = (*labels_copy)[static_cast<std::size_t>(p)];
                             if (y == ignore_index) continue;
                             for (std::int64_t j = 0; j < c; ++j) gl[p * c + j] = s * (*probs)[p * c + j];
                             gl[p * c + y] -= s;
                           }
                           return std::vector<Tensor<T>>{std::move(gl)};
                         });
}

#define HILA_INSTANTIATE(T)                                                                                 \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> scale<T>(const Var<T>&, T);                                                               \
  template Var<T> axpby<T>(T, const Var<T>&, T, const Var<T>&);                                             \
  template Var<T> add_lastdim<T>(const Var<T>&, const Var<T>&);                                             \
  template Var<T> sum<T>(const Var<T>&);                                                                    \
  template Var<T> mean<T>(const Var<T>&);                                                                   \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&, bool, bool);                                      \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                   \
  template Var<T> softmax_lastdim<T>(const Var<T>&, std::shared_ptr<const std::vector<std::uint8_t>>);      \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                            \
  template Var<T> gelu<T>(const Var<T>&);                                                                   \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, kernels::ConvSpec);                \
  template Var<T> unfold<T>(const Var<T>&, const PatchGeometry&);                                           \
  template Var<T> fold<T>(const Var<T>&, std::int64_t, std::int64_t, const PatchGeometry&);                 \
  template Var<T> cover_softmax<T>(const Var<T>&, std::int64_t, std::int64_t, const PatchGeometry&);        \
  template Var<T> bilinear_resize<T>(const Var<T>&, std::int64_t, std::int64_t);                            \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                         \
  template Var<T> permute<T>(const Var<T>&, std::vector<int>);                                              \
  template Var<T> concat_lastdim<T>(const std::vector<Var<T>>&);                                            \
  template Var<T> pad_bottom_right<T>(const Var<T>&, std::int64_t, std::int64_t);                           \
  template Var<T> crop_top_left<T>(const Var<T>&, std::int64_t, std::int64_t);                              \
  template Var<T> cross_entropy<T>(const Var<T>&, const std::vector<std::uint8_t>&, int);

HILA_INSTANTIATE(float)
HILA_INSTANTIATE(double)
#undef HILA_INSTANTIATE

}  // namespace hila::ops
