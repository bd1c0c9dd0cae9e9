#include "hila/encoder.hpp"

#include <cmath>

#include "hila/ops.hpp"

namespace hila {

template <typename T>
Var<T> patch_merge(const Var<T>& x, const PatchMergeParams<T>& p) {
  const int k = static_cast<int>(p.conv.w.dim(0));
  const std::int64_t pad = 2 * p.conv.spec.padding;
  if (x.value().rank() != 4 || x.dim(1) + pad < k || x.dim(2) + pad < k) {
    throw ShapeError("patch merge: input " + shape_str(x.shape()) + " smaller than kernel " + std::to_string(k) +
                     " after padding");
  }
  return apply(p.ln, apply(p.conv, x));
}

template <typename T>
Var<T> sra_block(const Var<T>& x, const SraParams<T>& p, Tensor<T>* attn_out) {
  const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
  const std::int64_t heads = p.heads;
  if (d % heads != 0) throw ConfigError("channels " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  const std::int64_t dh = d / heads;
  const std::int64_t n = h * w;

  const Var<T> hn = apply(p.ln1, x);
  Var<T> kv_src = hn;
  if (p.sr) {
    const std::int64_t ph = (p.R - h % p.R) % p.R, pw = (p.R - w % p.R) % p.R;
    kv_src = apply(*p.ln_sr, apply(*p.sr, ops::pad_bottom_right(hn, ph, pw)));
  }
  const std::int64_t m = kv_src.dim(1) * kv_src.dim(2);

  auto split = [&](const Var<T>& t, std::int64_t len) {
    if (heads == 1) return ops::reshape(t, {b, 1, len, dh});
    return ops::permute(ops::reshape(t, {b, len, heads, dh}), {0, 2, 1, 3});
  };
  const Var<T> q = split(apply(p.q, hn), n);
  const Var<T> k = split(apply(p.k, kv_src), m);
  const Var<T> v = split(apply(p.v, kv_src), m);

  Var<T> attn = ops::softmax_lastdim(ops::scale(ops::matmul(q, k, false, true), static_cast<T>(1.0 / std::sqrt(double(dh)))));
  if (attn_out) *attn_out = attn.value();
  Var<T> o = ops::matmul(attn, v);  // [B, heads, n, dh]
  if (heads > 1) o = ops::permute(o, {0, 2, 1, 3});
  o = apply(p.proj, ops::reshape(o, {b, h, w, d}));
  const Var<T> y = ops::add(x, o);
  return mix_ffn(y, p.ffn, T(1), T(1));
}

namespace {

std::string stage_name(int index) { return "s" + std::to_string(index + 1); }

// Creates parameters, or looks them up with a shape check, under one naming scheme.
template <typename T>
struct Binder {
  ParamStore<T>& ps;
  bool create;

  Var<T> param(const std::string& name, const Shape& shape, Init init) {
    if (create) return ps.create(name, shape, init);
    const Var<T>& v = ps.get(name);
    if (v.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(v.shape()) + ", expected " + shape_str(shape));
    }
    return v;
  }
  LinearP<T> linear(const std::string& name, std::int64_t din, std::int64_t dout, Init wi = Init::trunc_normal) {
    return {param(name + ".w", {din, dout}, wi), param(name + ".b", {dout}, Init::zeros)};
  }
  NormP<T> norm(const std::string& name, std::int64_t dim) {
    return {param(name + ".g", {dim}, Init::ones), param(name + ".b", {dim}, Init::zeros)};
  }
  ConvP<T> conv(const std::string& name, int k, std::int64_t cin, std::int64_t cout, kernels::ConvSpec spec) {
    return {param(name + ".w", {k, k, spec.depthwise ? 1 : cin, cout}, Init::trunc_normal),
            param(name + ".b", {cout}, Init::zeros), spec};
  }
  MixFfnParams<T> ffn(const std::string& name, std::int64_t dim, std::int64_t e) {
    if (e < 1) throw ConfigError("mix-ffn expansion must be >= 1");
    return {norm(name + ".ln", dim), linear(name + ".fc1", dim, dim * e), conv(name + ".dw", 3, dim * e, dim * e, {1, 1, true}),
            linear(name + ".fc2", dim * e, dim)};
  }
  InterLevelAttnParams<T> interlevel(const std::string& name, std::int64_t dq, std::int64_t dc, const PatchGeometry& g) {
    const std::int64_t d = std::min(dq, dc);
    InterLevelAttnParams<T> p;
    p.ln_query = norm(name + ".ln_query", dq);
    p.ln_context = norm(name + ".ln_context", dc);
    p.q = linear(name + ".q", dq, d);
    p.k = linear(name + ".k", dc, d);
    p.v = linear(name + ".v", dc, d);
    p.f = linear(name + ".f", d, dq, Init::zeros);
    p.bias = param(name + ".bias", {g.slots()}, Init::zeros);
    return p;
  }
  SraParams<T> sra(const std::string& name, const StageConfig& sc) {
    SraParams<T> p;
    p.heads = sc.H;
    p.R = sc.R;
    p.ln1 = norm(name + ".ln1", sc.d);
    p.q = linear(name + ".q", sc.d, sc.d);
    p.k = linear(name + ".k", sc.d, sc.d);
    p.v = linear(name + ".v", sc.d, sc.d);
    p.proj = linear(name + ".proj", sc.d, sc.d);
    if (sc.R > 1) {
      p.sr = conv(name + ".sr", sc.R, sc.d, sc.d, {sc.R, 0, false});
      p.ln_sr = norm(name + ".ln_sr", sc.d);
    }
    p.ffn = ffn(name + ".ffn", sc.d, sc.E);
    return p;
  }
};

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
  cfg_.validate();
  bind(true);
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, ParamStore<T> store) : cfg_(cfg), store_(std::move(store)) {
  cfg_.validate();
  bind(false);
}

template <typename T>
template <typename U>
Model<T> Model<T>::from(const Model<U>& other) {
  ParamStore<T> store(other.params().seed());
  const auto& names = other.params().names();
  for (std::size_t i = 0; i < names.size(); ++i)
    store.adopt(names[i], other.params().vars()[i].value().template cast<T>());
  return Model<T>(other.config(), std::move(store));
}

template <typename T>
void Model<T>::bind(bool create) {
  Binder<T> b{store_, create};
  for (int i = 0; i < 4; ++i) {
    const auto& sc = cfg_.stages[static_cast<std::size_t>(i)];
    const std::string sn = stage_name(i);
    auto& sp = stages_[static_cast<std::size_t>(i)];
    const int cin = i == 0 ? cfg_.input_channels : cfg_.stages[static_cast<std::size_t>(i - 1)].d;
    sp.merge.conv = b.conv(sn + ".merge.conv", sc.K, cin, sc.d, {sc.S, sc.K / 2, false});
    sp.merge.ln = b.norm(sn + ".merge.ln", sc.d);
    sp.blocks.clear();
    for (int j = 0; j < sc.N; ++j) sp.blocks.push_back(b.sra(sn + ".block" + std::to_string(j + 1), sc));
    sp.hila.reset();
    if (sc.hila) {
      const auto& lower = cfg_.stages[static_cast<std::size_t>(i - 1)];
      const PatchGeometry g = sc.geometry();
      HilaParams<T> h;
      h.bu = b.interlevel(sn + ".hila.bu", sc.d, lower.d, g);
      h.bu_ffn = b.ffn(sn + ".hila.bu_ffn", sc.d, sc.E);
      h.td = b.interlevel(sn + ".hila.td", lower.d, sc.d, g);
      h.td_ffn = b.ffn(sn + ".hila.td_ffn", lower.d, sc.E);
      h.td_block = b.sra(sn + ".hila.td_block", lower);
      sp.hila = std::move(h);
    }
  }
  for (int i = 0; i < 4; ++i)
    head_.proj[static_cast<std::size_t>(i)] =
        b.linear("head.proj" + std::to_string(i + 1), cfg_.stages[static_cast<std::size_t>(i)].d, cfg_.decode_dim);
  head_.fuse = b.linear("head.fuse", 4 * cfg_.decode_dim, cfg_.decode_dim);
  head_.cls = b.linear("head.cls", cfg_.decode_dim, cfg_.num_classes);
}

template <typename T>
FeatureMap<T> Model<T>::run_stage(int index, const Var<T>& input, FeatureMap<T>* prev, StageTrace* trace,
                                  std::optional<InterLevelWeights<T>>* td_w,
                                  std::optional<InterLevelWeights<T>>* bu_w) const {
  const auto& sc = cfg_.stages[static_cast<std::size_t>(index)];
  const auto& sp = stages_[static_cast<std::size_t>(index)];
  FeatureMap<T> cur{patch_merge(input, sp.merge), index + 1, 0};
  if (sp.hila && !prev) throw ContractError("stage " + std::to_string(index + 1) + " needs the lower stage map");
  const PatchGeometry g = sc.geometry();
  const T alpha = static_cast<T>(sc.alpha), beta = static_cast<T>(sc.beta);
  bool first = true;
  for (int i = 1; i <= sc.N; ++i) {
    const auto& block = sp.blocks[static_cast<std::size_t>(i - 1)];
    if (sp.hila && sc.wraps_block(i)) {
      const auto& h = *sp.hila;
      if (trace) trace->wrapped_blocks.push_back(i);
      if (!first) {
        if (trace) trace->td_blocks.push_back(i);
        BlockFn<T> td_block = [&](const Var<T>& x) { return sra_block(x, h.td_block); };
        InterLevelWeights<T> w;
        prev->data = top_down_update(prev->data, cur.data, h.td, h.td_ffn, alpha, beta, td_block, g, td_w ? &w : nullptr);
        prev->iteration += 1;
        if (td_w) *td_w = std::move(w);
      }
      first = false;
      BlockFn<T> own = [&](const Var<T>& x) { return sra_block(x, block); };
      InterLevelWeights<T> w;
      cur.data = bottom_up_update(cur.data, prev->data, h.bu, h.bu_ffn, alpha, beta, own, g, bu_w ? &w : nullptr);
      if (bu_w) *bu_w = std::move(w);
    } else {
      cur.data = sra_block(cur.data, block);
    }
    cur.iteration += 1;
  }
  return cur;
}

template <typename T>
EncoderOutput<T> Model<T>::forward_encoder(const Var<T>& image, const ForwardOptions& opt) const {
  if (image.value().rank() != 4 || image.dim(3) != cfg_.input_channels) {
    throw ShapeError("image must be [B,H,W," + std::to_string(cfg_.input_channels) + "], got " + shape_str(image.shape()));
  }
  if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0 || image.dim(1) == 0 || image.dim(2) == 0) {
    throw ShapeError("image height and width must be positive multiples of 32, got " + std::to_string(image.dim(1)) +
                     "x" + std::to_string(image.dim(2)));
  }
  EncoderOutput<T> out;
  for (int i = 0; i < 4; ++i) {
    auto* td = opt.record_weights ? &out.td_weights[static_cast<std::size_t>(i)] : nullptr;
    auto* bu = opt.record_weights ? &out.bu_weights[static_cast<std::size_t>(i)] : nullptr;
    auto& trace = out.traces[static_cast<std::size_t>(i)];
    if (i == 0) {
      out.features[0] = run_stage(0, image, nullptr, &trace, td, bu);
    } else {
      auto& prev = out.features[static_cast<std::size_t>(i - 1)];
      const Var<T> input = prev.data;
      out.features[static_cast<std::size_t>(i)] = run_stage(i, input, &prev, &trace, td, bu);
    }
  }
  return out;
}

template <typename T>
Var<T> Model<T>::decode_head(const std::array<FeatureMap<T>, 4>& features) const {
  const std::int64_t h = features[0].data.dim(1), w = features[0].data.dim(2);
  std::vector<Var<T>> parts;
  for (std::size_t i = 0; i < 4; ++i) {
    Var<T> y = apply(head_.proj[i], features[i].data);
    if (y.dim(1) != h || y.dim(2) != w) y = ops::bilinear_resize(y, h, w);
    parts.push_back(y);
  }
  Var<T> fused = ops::gelu(apply(head_.fuse, ops::concat_lastdim(parts)));
  return apply(head_.cls, fused);
}

template <typename T>
Var<T> Model<T>::forward(const Var<T>& image) const {
  return decode_head(forward_encoder(image).features);
}

template <typename T>
Var<T> segmentation_loss(const Var<T>& logits, const std::vector<std::uint8_t>& labels, std::int64_t label_h,
                         std::int64_t label_w, int ignore_index) {
  return ops::cross_entropy(ops::bilinear_resize(logits, label_h, label_w), labels, ignore_index);
}

template <typename T>
std::vector<std::uint8_t> predict_labels(const Tensor<T>& logits, std::int64_t out_h, std::int64_t out_w) {
  const Tensor<T> up = kernels::bilinear_resize(logits, out_h, out_w);
  const std::int64_t c = up.dim(3);
  std::vector<std::uint8_t> pred(static_cast<std::size_t>(up.numel() / c));
  for (std::size_t p = 0; p < pred.size(); ++p) {
    const T* row = up.ptr() + static_cast<std::int64_t>(p) * c;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    pred[p] = static_cast<std::uint8_t>(best);
  }
  return pred;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<double>::from<float>(const Model<float>&);
template Model<float> Model<float>::from<double>(const Model<double>&);
template Model<float> Model<float>::from<float>(const Model<float>&);
template Model<double> Model<double>::from<double>(const Model<double>&);

#define HILA_INSTANTIATE(T)                                                                                \
  template Var<T> patch_merge<T>(const Var<T>&, const PatchMergeParams<T>&);                               \
  template Var<T> sra_block<T>(const Var<T>&, const SraParams<T>&, Tensor<T>*);                            \
  template Var<T> segmentation_loss<T>(const Var<T>&, const std::vector<std::uint8_t>&, std::int64_t,      \
                                       std::int64_t, int);                                                 \
  template std::vector<std::uint8_t> predict_labels<T>(const Tensor<T>&, std::int64_t, std::int64_t);

HILA_INSTANTIATE(float)
HILA_INSTANTIATE(double)
#undef HILA_INSTANTIATE

}  // namespace hila
