#pragma once

#include <functional>
#include <string>

#include "hila/nn.hpp"

namespace hila {

enum class Direction { bottom_up, top_down };

/// Single-head attention between adjacent levels. The query side is the level being
/// updated; keys and values come from the other level. Inner width d is the smaller
/// of the two channel widths.
template <typename T>
struct InterLevelAttnParams {
  NormP<T> ln_query, ln_context;
  LinearP<T> q, k, v;
  LinearP<T> f;     // d -> query width
  Var<T> bias;      // one entry per window slot
  std::int64_t inner_dim() const { return q.w.dim(1); }
};

template <typename T>
InterLevelAttnParams<T> make_interlevel(ParamStore<T>& ps, const std::string& name, std::int64_t d_query,
                                        std::int64_t d_context, const PatchGeometry& g);
template <typename T>
InterLevelAttnParams<T> get_interlevel(const ParamStore<T>& ps, const std::string& name);

template <typename T>
struct MixFfnParams {
  NormP<T> ln;
  LinearP<T> fc1;
  ConvP<T> dw;   // depthwise 3x3, stride 1, padding 1
  LinearP<T> fc2;
};

template <typename T>
MixFfnParams<T> make_mix_ffn(ParamStore<T>& ps, const std::string& name, std::int64_t d, std::int64_t expansion);
template <typename T>
MixFfnParams<T> get_mix_ffn(const ParamStore<T>& ps, const std::string& name);

/// alpha*x + beta*fc2(gelu(dwconv3x3(fc1(ln(x)))))
template <typename T>
Var<T> mix_ffn(const Var<T>& x, const MixFfnParams<T>& p, T alpha, T beta);

/// Attention weights of one inter-level call, laid out per higher-level location and window slot.
template <typename T>
struct InterLevelWeights {
  Tensor<T> m;   // [B, Ht*Wt, k*k]
  Direction direction = Direction::bottom_up;
  PatchGeometry geometry;
  std::int64_t hi_h = 0, hi_w = 0, lo_h = 0, lo_w = 0;
};

/// x_hi [B,Ht,Wt,d_hi] attends to the k*k lower-level features in its window; returns x_hi + f(attn).
/// Padding taps are excluded from the softmax.
template <typename T>
Var<T> bottom_up_attention(const Var<T>& x_hi, const Var<T>& x_lo, const InterLevelAttnParams<T>& p,
                           const PatchGeometry& g, InterLevelWeights<T>* weights = nullptr);

/// Each lower-level pixel attends to the higher-level locations whose windows cover it.
/// Patch-wise implementation: exp-logits are normalized by fold-summed denominators and
/// the weighted values are folded back to the lower grid before f.
template <typename T>
Var<T> top_down_attention(const Var<T>& x_lo, const Var<T>& x_hi, const InterLevelAttnParams<T>& p,
                          const PatchGeometry& g, InterLevelWeights<T>* weights = nullptr);

/// Reference top-down attention: per-pixel enumeration of the covering set with plain loops.
/// Forward only. Weights are returned in the same [B, Ht*Wt, k*k] layout.
template <typename T>
Tensor<T> top_down_attention_naive(const Tensor<T>& x_lo, const Tensor<T>& x_hi, const InterLevelAttnParams<T>& p,
                                   const PatchGeometry& g, Tensor<T>* weights = nullptr);

template <typename T>
using BlockFn = std::function<Var<T>(const Var<T>&)>;

/// bottom-up attention -> alpha/beta mix-FFN -> the stage's own self-attention block
template <typename T>
Var<T> bottom_up_update(const Var<T>& x_hi, const Var<T>& x_lo, const InterLevelAttnParams<T>& attn,
                        const MixFfnParams<T>& ffn, T alpha, T beta, const BlockFn<T>& block, const PatchGeometry& g,
                        InterLevelWeights<T>* weights = nullptr);

/// top-down attention -> alpha/beta mix-FFN -> the dedicated lower-level self-attention block
template <typename T>
Var<T> top_down_update(const Var<T>& x_lo, const Var<T>& x_hi, const InterLevelAttnParams<T>& attn,
                       const MixFfnParams<T>& ffn, T alpha, T beta, const BlockFn<T>& block, const PatchGeometry& g,
                       InterLevelWeights<T>* weights = nullptr);

}  // namespace hila
