#pragma once

#include <array>
#include <optional>
#include <vector>

#include "hila/encoder.hpp"
#include "hila/image.hpp"

namespace hila {

struct MaskEntry {
  std::int64_t col;
  double w;
};

/// Whole-to-part mask from locations of `source_stage` to pixels of `target_stage`,
/// stored row-sparse (entries sorted by column).
struct HierarchyMask {
  int source_stage = 0, target_stage = 0;
  std::int64_t src_h = 0, src_w = 0, tgt_h = 0, tgt_w = 0;
  std::vector<std::vector<MaskEntry>> rows;
  bool normalized = false;

  double row_sum(std::int64_t r) const;
  Tensor<double> dense() const;  // [src_h*src_w, tgt_h*tgt_w]
};

/// Square window in target-grid coordinates; may extend past the grid.
struct Window {
  std::int64_t top = 0, left = 0, side = 0;
  bool contains(std::int64_t y, std::int64_t x) const {
    return y >= top && y < top + side && x >= left && x < left + side;
  }
};

HierarchyMask identity_mask(int stage, std::int64_t h, std::int64_t w);

/// One-level mask from recorded top-down weights of sample `batch`: row l holds, for every
/// in-bounds pixel of window l, the weight that pixel gives to higher location l.
template <typename T>
HierarchyMask from_topdown(const InterLevelWeights<T>& w, int source_stage, std::int64_t batch = 0);

/// Sum over intermediate locations of upper(r, i) * lower(i, c). Result is raw.
HierarchyMask compose(const HierarchyMask& upper, const HierarchyMask& lower);
/// Rows rescaled to sum to one; all-zero rows stay empty.
HierarchyMask normalize(HierarchyMask m);

/// Side of the window a source location can reach at the target stage: w1 = k, w_{n+1} = k + (w_n - 1) s.
int receptive_window(int source_stage, int target_stage, const PatchGeometry& g);
/// The same window placed for query (qy, qx); levels[0] is the geometry of the topmost step.
Window support_window(std::int64_t qy, std::int64_t qx, const std::vector<PatchGeometry>& levels);

/// Normalized mask source -> target built from the last recorded top-down weights of each
/// stage in between. ContractError when a needed stage has no recorded weights.
template <typename T>
HierarchyMask hierarchy_from_output(const EncoderOutput<T>& out, int source_stage, int target_stage,
                                    std::int64_t batch = 0);

struct RenderOptions {
  double alpha = 0.6;
  std::array<std::uint8_t, 3> tint{255, 32, 32};
  std::array<std::uint8_t, 3> box{32, 255, 32};
};

/// Row (qy, qx) of the mask, max-normalized, blended over a grayscale copy of `base`
/// (which may be an integer multiple of the target grid). With alpha == 0 the base is
/// returned untouched; otherwise `window`, if given, is outlined.
Image render_mask(const HierarchyMask& m, std::int64_t qy, std::int64_t qx, const Image& base,
                  const RenderOptions& opt = {}, const std::optional<Window>& window = std::nullopt);

}  // namespace hila
