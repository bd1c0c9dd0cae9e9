#pragma once

#include <array>
#include <optional>
#include <vector>

#include "hila/config.hpp"
#include "hila/interlevel.hpp"

namespace hila {

template <typename T>
struct FeatureMap {
  Var<T> data;       // [B, H_l, W_l, d_l]
  int stage = 0;     // 1-based
  int iteration = 0; // number of blocks/updates applied since patch merging
};

/// Pre-norm transformer block with spatial-reduction attention and a Mix-FFN.
template <typename T>
struct SraParams {
  NormP<T> ln1;
  LinearP<T> q, k, v, proj;
  std::optional<ConvP<T>> sr;  // R x R stride-R conv when R > 1
  std::optional<NormP<T>> ln_sr;
  MixFfnParams<T> ffn;
  int heads = 1;
  int R = 1;
};

template <typename T>
struct PatchMergeParams {
  ConvP<T> conv;
  NormP<T> ln;
};

template <typename T>
struct HilaParams {
  InterLevelAttnParams<T> bu, td;
  MixFfnParams<T> bu_ffn, td_ffn;
  SraParams<T> td_block;  // new lower-level block used by every top-down update of the stage
};

template <typename T>
struct StageParams {
  PatchMergeParams<T> merge;
  std::vector<SraParams<T>> blocks;
  std::optional<HilaParams<T>> hila;
};

template <typename T>
struct HeadParams {
  std::array<LinearP<T>, 4> proj;
  LinearP<T> fuse, cls;
};

struct StageTrace {
  std::vector<int> wrapped_blocks;  // 1-based block indices wrapped by HILA
  std::vector<int> td_blocks;       // blocks that ran a top-down update first
};

template <typename T>
struct EncoderOutput {
  std::array<FeatureMap<T>, 4> features;
  std::array<StageTrace, 4> traces;
  // Weights of the last inter-level call per stage (index = higher stage - 1), when recorded.
  std::array<std::optional<InterLevelWeights<T>>, 4> td_weights, bu_weights;
};

struct ForwardOptions {
  bool record_weights = false;
};

template <typename T>
Var<T> patch_merge(const Var<T>& x, const PatchMergeParams<T>& p);

/// x + proj(MHA(LN(x))) with keys/values from an R x R strided conv + LN of LN(x)
/// (padded bottom/right to a multiple of R), then the Mix-FFN residual.
/// attn_out, when given, receives the attention probabilities [B, heads, HW, M].
template <typename T>
Var<T> sra_block(const Var<T>& x, const SraParams<T>& p, Tensor<T>* attn_out = nullptr);

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  // Same parameter values at another precision.
  template <typename U>
  static Model from(const Model<U>& other);
  // Rebinds to an existing store (e.g. loaded from a checkpoint); shapes are checked.
  Model(const ModelConfig& cfg, ParamStore<T> store);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const std::array<StageParams<T>, 4>& stages() const { return stages_; }
  const HeadParams<T>& head() const { return head_; }

  /// Runs stage `index` (0-based). prev is the current map of the stage below (ignored
  /// for index 0, where `input` is the image). Returns the new stage map and writes the
  /// refined lower map back into prev.
  FeatureMap<T> run_stage(int index, const Var<T>& input, FeatureMap<T>* prev, StageTrace* trace,
                          std::optional<InterLevelWeights<T>>* td_w, std::optional<InterLevelWeights<T>>* bu_w) const;

  EncoderOutput<T> forward_encoder(const Var<T>& image, const ForwardOptions& opt = {}) const;
  /// [B, H/4, W/4, num_classes]
  Var<T> decode_head(const std::array<FeatureMap<T>, 4>& features) const;
  Var<T> forward(const Var<T>& image) const;

 private:
  void bind(bool create);

  ModelConfig cfg_;
  ParamStore<T> store_;
  std::array<StageParams<T>, 4> stages_;
  HeadParams<T> head_;
};

/// Mean cross-entropy of quarter-resolution logits against full-resolution labels;
/// logits are bilinearly upsampled to the label grid first.
template <typename T>
Var<T> segmentation_loss(const Var<T>& logits, const std::vector<std::uint8_t>& labels, std::int64_t label_h,
                         std::int64_t label_w, int ignore_index = 255);

/// Upsampled logits -> class ids (argmax, first max wins).
template <typename T>
std::vector<std::uint8_t> predict_labels(const Tensor<T>& logits, std::int64_t out_h, std::int64_t out_w);

}  // namespace hila
