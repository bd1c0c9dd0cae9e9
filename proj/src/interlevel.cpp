#include "hila/interlevel.hpp"

#include <algorithm>
#include <cmath>

#include "hila/mac_counter.hpp"
#include "hila/ops.hpp"

namespace hila {

template <typename T>
InterLevelAttnParams<T> make_interlevel(ParamStore<T>& ps, const std::string& name, std::int64_t d_query,
                                        std::int64_t d_context, const PatchGeometry& g) {
  const std::int64_t d = std::min(d_query, d_context);
  InterLevelAttnParams<T> p;
  p.ln_query = make_norm(ps, name + ".ln_query", d_query);
  p.ln_context = make_norm(ps, name + ".ln_context", d_context);
  p.q = make_linear(ps, name + ".q", d_query, d);
  p.k = make_linear(ps, name + ".k", d_context, d);
  p.v = make_linear(ps, name + ".v", d_context, d);
  // zero-initialized output projection: a fresh layer starts as the identity
  p.f = make_linear(ps, name + ".f", d, d_query, Init::zeros);
  p.bias = ps.create(name + ".bias", {g.slots()}, Init::zeros);
  return p;
}

template <typename T>
InterLevelAttnParams<T> get_interlevel(const ParamStore<T>& ps, const std::string& name) {
  InterLevelAttnParams<T> p;
  p.ln_query = get_norm(ps, name + ".ln_query");
  p.ln_context = get_norm(ps, name + ".ln_context");
  p.q = get_linear(ps, name + ".q");
  p.k = get_linear(ps, name + ".k");
  p.v = get_linear(ps, name + ".v");
  p.f = get_linear(ps, name + ".f");
  p.bias = ps.get(name + ".bias");
  return p;
}

template <typename T>
MixFfnParams<T> make_mix_ffn(ParamStore<T>& ps, const std::string& name, std::int64_t d, std::int64_t expansion) {
  if (expansion < 1) throw ConfigError("mix-ffn expansion must be >= 1");
  const std::int64_t hidden = d * expansion;
  MixFfnParams<T> p;
  p.ln = make_norm(ps, name + ".ln", d);
  p.fc1 = make_linear(ps, name + ".fc1", d, hidden);
  p.dw = make_conv(ps, name + ".dw", 3, hidden, hidden, {1, 1, true});
  p.fc2 = make_linear(ps, name + ".fc2", hidden, d);
  return p;
}

template <typename T>
MixFfnParams<T> get_mix_ffn(const ParamStore<T>& ps, const std::string& name) {
  MixFfnParams<T> p;
  p.ln = get_norm(ps, name + ".ln");
  p.fc1 = get_linear(ps, name + ".fc1");
  p.dw = {ps.get(name + ".dw.w"), ps.get(name + ".dw.b"), {1, 1, true}};
  p.fc2 = get_linear(ps, name + ".fc2");
  return p;
}

template <typename T>
Var<T> mix_ffn(const Var<T>& x, const MixFfnParams<T>& p, T alpha, T beta) {
  Var<T> h = apply(p.ln, x);
  h = apply(p.fc1, h);
  h = apply(p.dw, h);
  h = ops::gelu(h);
  h = apply(p.fc2, h);
  if (alpha == T(1) && beta == T(1)) return ops::add(x, h);
  return ops::axpby(alpha, x, beta, h);
}

namespace {

void check_geometry(std::int64_t hi_h, std::int64_t hi_w, std::int64_t lo_h, std::int64_t lo_w,
                    const PatchGeometry& g) {
  if (g.out_extent(lo_h) != hi_h || g.out_extent(lo_w) != hi_w) {
    throw GeometryError("higher-level grid " + std::to_string(hi_h) + "x" + std::to_string(hi_w) +
                        " does not match lower-level grid " + std::to_string(lo_h) + "x" + std::to_string(lo_w) +
                        " under kernel " + std::to_string(g.kernel) + " stride " + std::to_string(g.stride) +
                        " padding " + std::to_string(g.padding));
  }
}

template <typename T>
void check_params(const InterLevelAttnParams<T>& p, std::int64_t d_query, std::int64_t d_context,
                  const PatchGeometry& g) {
  const std::int64_t d = std::min(d_query, d_context);
  const bool ok = p.q.w.shape() == Shape{d_query, d} && p.k.w.shape() == Shape{d_context, d} &&
                  p.v.w.shape() == Shape{d_context, d} && p.f.w.shape() == Shape{d, d_query} &&
                  p.bias.value().numel() == g.slots();
  if (!ok) {
    throw ShapeError("inter-level projections " + shape_str(p.q.w.shape()) + "/" + shape_str(p.k.w.shape()) +
                     " do not fit query width " + std::to_string(d_query) + ", context width " +
                     std::to_string(d_context) + ", " + std::to_string(g.slots()) + " slots");
  }
}

const char* tag_fc(Direction d) { return d == Direction::bottom_up ? "bottom_up.fc" : "top_down.fc"; }
const char* tag_dot(Direction d) { return d == Direction::bottom_up ? "bottom_up.dot" : "top_down.dot"; }

}  // namespace

template <typename T>
Var<T> bottom_up_attention(const Var<T>& x_hi, const Var<T>& x_lo, const InterLevelAttnParams<T>& p,
                           const PatchGeometry& g, InterLevelWeights<T>* weights) {
  const std::int64_t b = x_hi.dim(0), ht = x_hi.dim(1), wt = x_hi.dim(2), d_hi = x_hi.dim(3);
  const std::int64_t hl = x_lo.dim(1), wl = x_lo.dim(2), d_lo = x_lo.dim(3);
  if (x_lo.dim(0) != b) throw ShapeError("batch mismatch between levels");
  check_geometry(ht, wt, hl, wl, g);
  check_params(p, d_hi, d_lo, g);
  const std::int64_t d = p.inner_dim();
  const std::int64_t l = ht * wt;
  const std::int64_t slots = g.slots();

  Var<T> q, k, v;
  {
    mac::Tag tag(tag_fc(Direction::bottom_up));
    q = ops::reshape(apply(p.q, apply(p.ln_query, x_hi)), {b, l, 1, d});
    const Var<T> ctx = apply(p.ln_context, x_lo);
    k = ops::unfold(apply(p.k, ctx), g);
    v = ops::unfold(apply(p.v, ctx), g);
  }
  Var<T> attn;
  {
    mac::Tag tag(tag_dot(Direction::bottom_up));
    Var<T> logits = ops::scale(ops::matmul(q, k, false, true), static_cast<T>(1.0 / std::sqrt(double(d))));
    logits = ops::add_lastdim(logits, p.bias);
    auto mask = std::make_shared<const std::vector<std::uint8_t>>(kernels::slot_valid_mask(hl, wl, g));
    attn = ops::softmax_lastdim(logits, mask);
    if (weights) *weights = {attn.value().reshaped({b, l, slots}), Direction::bottom_up, g, ht, wt, hl, wl};
    attn = ops::matmul(attn, v);
  }
  Var<T> out;
  {
    mac::Tag tag(tag_fc(Direction::bottom_up));
    out = apply(p.f, ops::reshape(attn, {b, ht, wt, d}));
  }
  return ops::add(x_hi, out);
}

template <typename T>
Var<T> top_down_attention(const Var<T>& x_lo, const Var<T>& x_hi, const InterLevelAttnParams<T>& p,
                          const PatchGeometry& g, InterLevelWeights<T>* weights) {
  const std::int64_t b = x_hi.dim(0), ht = x_hi.dim(1), wt = x_hi.dim(2), d_hi = x_hi.dim(3);
  const std::int64_t hl = x_lo.dim(1), wl = x_lo.dim(2), d_lo = x_lo.dim(3);
  if (x_lo.dim(0) != b) throw ShapeError("batch mismatch between levels");
  check_geometry(ht, wt, hl, wl, g);
  check_params(p, d_lo, d_hi, g);
  const std::int64_t d = p.inner_dim();
  const std::int64_t l = ht * wt;
  const std::int64_t slots = g.slots();

  Var<T> q, k, v;
  {
    mac::Tag tag(tag_fc(Direction::top_down));
    q = ops::unfold(apply(p.q, apply(p.ln_query, x_lo)), g);  // [B, L, slots, d]
    const Var<T> ctx = apply(p.ln_context, x_hi);
    k = ops::reshape(apply(p.k, ctx), {b, l, 1, d});
    v = ops::reshape(apply(p.v, ctx), {b, l, 1, d});
  }
  Var<T> folded;
  {
    mac::Tag tag(tag_dot(Direction::top_down));
    Var<T> logits = ops::matmul(q, k, false, true);  // [B, L, slots, 1]
    logits = ops::scale(ops::reshape(logits, {b, l, slots}), static_cast<T>(1.0 / std::sqrt(double(d))));
    logits = ops::add_lastdim(logits, p.bias);
    Var<T> m = ops::cover_softmax(logits, hl, wl, g);
    if (weights) *weights = {m.value(), Direction::top_down, g, ht, wt, hl, wl};
    Var<T> contrib = ops::matmul(ops::reshape(m, {b, l, slots, 1}), v);  // [B, L, slots, d]
    folded = ops::fold(contrib, hl, wl, g);
  }
  Var<T> out;
  {
    mac::Tag tag(tag_fc(Direction::top_down));
    out = apply(p.f, folded);
  }
  return ops::add(x_lo, out);
}

namespace {

template <typename T>
void naive_ln(const T* x, std::int64_t n, const Tensor<T>& g, const Tensor<T>& b, T* out) {
  double mean = 0;
  for (std::int64_t i = 0; i < n; ++i) mean += x[i];
  mean /= double(n);
  double var = 0;
  for (std::int64_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= double(n);
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::int64_t i = 0; i < n; ++i) out[i] = static_cast<T>((x[i] - mean) * inv * g[i] + b[i]);
}

template <typename T>
void naive_linear(const T* x, std::int64_t din, const LinearP<T>& p, T* out) {
  const std::int64_t dout = p.w.dim(1);
  for (std::int64_t o = 0; o < dout; ++o) {
    double s = p.b.value()[o];
    for (std::int64_t i = 0; i < din; ++i) s += double(x[i]) * p.w.value()[i * dout + o];
    out[o] = static_cast<T>(s);
  }
}

}  // namespace

template <typename T>
Tensor<T> top_down_attention_naive(const Tensor<T>& x_lo, const Tensor<T>& x_hi, const InterLevelAttnParams<T>& p,
                                   const PatchGeometry& g, Tensor<T>* weights) {
  const std::int64_t b = x_hi.dim(0), ht = x_hi.dim(1), wt = x_hi.dim(2), d_hi = x_hi.dim(3);
  const std::int64_t hl = x_lo.dim(1), wl = x_lo.dim(2), d_lo = x_lo.dim(3);
  check_geometry(ht, wt, hl, wl, g);
  check_params(p, d_lo, d_hi, g);
  const std::int64_t d = p.inner_dim();
  const std::int64_t k = g.kernel;
  const double scale = 1.0 / std::sqrt(double(d));

  // keys and values of every higher-level location
  std::vector<T> keys(static_cast<std::size_t>(b * ht * wt * d)), vals(keys.size()), tmp(static_cast<std::size_t>(d_hi));
  for (std::int64_t loc = 0; loc < b * ht * wt; ++loc) {
    naive_ln(x_hi.ptr() + loc * d_hi, d_hi, p.ln_context.g.value(), p.ln_context.b.value(), tmp.data());
    naive_linear(tmp.data(), d_hi, p.k, keys.data() + loc * d);
    naive_linear(tmp.data(), d_hi, p.v, vals.data() + loc * d);
  }

  Tensor<T> out = x_lo;
  if (weights) *weights = Tensor<T>(Shape{b, ht * wt, g.slots()});
  std::vector<T> ln(static_cast<std::size_t>(d_lo)), q(static_cast<std::size_t>(d)), mixed(static_cast<std::size_t>(d)),
      proj(static_cast<std::size_t>(d_lo));
  struct Cover {
    std::int64_t loc, slot;
    double logit;
  };
  std::vector<Cover> covers;
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t y = 0; y < hl; ++y)
      for (std::int64_t x = 0; x < wl; ++x) {
        const T* px = x_lo.ptr() + ((bi * hl + y) * wl + x) * d_lo;
        naive_ln(px, d_lo, p.ln_query.g.value(), p.ln_query.b.value(), ln.data());
        naive_linear(ln.data(), d_lo, p.q, q.data());
        covers.clear();
        for (std::int64_t i = 0; i < ht; ++i)
          for (std::int64_t j = 0; j < wt; ++j) {
            const std::int64_t oy = y - (i * g.stride - g.padding);
            const std::int64_t ox = x - (j * g.stride - g.padding);
            if (oy < 0 || oy >= k || ox < 0 || ox >= k) continue;
            const std::int64_t loc = (bi * ht + i) * wt + j;
            const std::int64_t slot = oy * k + ox;
            double dot = 0;
            for (std::int64_t c = 0; c < d; ++c) dot += double(q[c]) * keys[loc * d + c];
            covers.push_back({loc, slot, dot * scale + p.bias.value()[slot]});
          }
        if (covers.empty()) continue;
        double mx = covers[0].logit;
        for (const auto& c : covers) mx = std::max(mx, c.logit);
        double z = 0;
        for (const auto& c : covers) z += std::exp(c.logit - mx);
        std::fill(mixed.begin(), mixed.end(), T(0));
        for (const auto& c : covers) {
          const double w = std::exp(c.logit - mx) / z;
          if (weights) (*weights)[c.loc * g.slots() + c.slot] = static_cast<T>(w);
          for (std::int64_t ch = 0; ch < d; ++ch) mixed[ch] += static_cast<T>(w * vals[c.loc * d + ch]);
        }
        naive_linear(mixed.data(), d, p.f, proj.data());
        T* po = out.ptr() + ((bi * hl + y) * wl + x) * d_lo;
        for (std::int64_t ch = 0; ch < d_lo; ++ch) po[ch] += proj[ch];
      }
  return out;
}

template <typename T>
Var<T> bottom_up_update(const Var<T>& x_hi, const Var<T>& x_lo, const InterLevelAttnParams<T>& attn,
                        const MixFfnParams<T>& ffn, T alpha, T beta, const BlockFn<T>& block, const PatchGeometry& g,
                        InterLevelWeights<T>* weights) {
  Var<T> x = bottom_up_attention(x_hi, x_lo, attn, g, weights);
  x = mix_ffn(x, ffn, alpha, beta);
  return block(x);
}

template <typename T>
Var<T> top_down_update(const Var<T>& x_lo, const Var<T>& x_hi, const InterLevelAttnParams<T>& attn,
                       const MixFfnParams<T>& ffn, T alpha, T beta, const BlockFn<T>& block, const PatchGeometry& g,
                       InterLevelWeights<T>* weights) {
  Var<T> x = top_down_attention(x_lo, x_hi, attn, g, weights);
  x = mix_ffn(x, ffn, alpha, beta);
  return block(x);
}

#define HILA_INSTANTIATE(T)                                                                                        \
  template InterLevelAttnParams<T> make_interlevel<T>(ParamStore<T>&, const std::string&, std::int64_t,            \
                                                      std::int64_t, const PatchGeometry&);                         \
  template InterLevelAttnParams<T> get_interlevel<T>(const ParamStore<T>&, const std::string&);                    \
  template MixFfnParams<T> make_mix_ffn<T>(ParamStore<T>&, const std::string&, std::int64_t, std::int64_t);        \
  template MixFfnParams<T> get_mix_ffn<T>(const ParamStore<T>&, const std::string&);                               \
  template Var<T> mix_ffn<T>(const Var<T>&, const MixFfnParams<T>&, T, T);                                         \
  template Var<T> bottom_up_attention<T>(const Var<T>&, const Var<T>&, const InterLevelAttnParams<T>&,             \
                                         const PatchGeometry&, InterLevelWeights<T>*);                             \
  template Var<T> top_down_attention<T>(const Var<T>&, const Var<T>&, const InterLevelAttnParams<T>&,              \
                                        const PatchGeometry&, InterLevelWeights<T>*);                              \
  template Tensor<T> top_down_attention_naive<T>(const Tensor<T>&, const Tensor<T>&, const InterLevelAttnParams<T>&, \
                                                 const PatchGeometry&, Tensor<T>*);                                \
  template Var<T> bottom_up_update<T>(const Var<T>&, const Var<T>&, const InterLevelAttnParams<T>&,                \
                                      const MixFfnParams<T>&, T, T, const BlockFn<T>&, const PatchGeometry&,       \
                                      InterLevelWeights<T>*);                                                      \
  template Var<T> top_down_update<T>(const Var<T>&, const Var<T>&, const InterLevelAttnParams<T>&,                 \
                                     const MixFfnParams<T>&, T, T, const BlockFn<T>&, const PatchGeometry&,        \
                                     InterLevelWeights<T>*);

HILA_INSTANTIATE(float)
HILA_INSTANTIATE(double)
#undef HILA_INSTANTIATE

}  // namespace hila
