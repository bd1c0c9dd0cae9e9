#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hila/config.hpp"
#include "hila/image.hpp"

namespace hila {

struct MiouResult {
  std::vector<std::optional<double>> per_class;  // nullopt: class absent from both maps
  std::optional<double> miou;                    // nullopt: no class present at all
  double pixel_accuracy = 0;                     // over non-ignored pixels (0 if none)
};

/// Confusion counts; accumulators merge associatively so images can be scored independently.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(int num_classes, int ignore_index = 255);

  // Pixels whose label is ignore_index are skipped. DataError for ids >= num_classes.
  void add(std::span<const int> pred, std::span<const int> label);
  void add(const LabelMap& pred, const LabelMap& label);
  void merge(const ConfusionAccumulator& other);
  MiouResult result() const;

  int num_classes() const { return num_classes_; }
  const std::vector<std::int64_t>& intersection() const { return inter_; }
  const std::vector<std::int64_t>& pred_count() const { return pred_; }
  const std::vector<std::int64_t>& label_count() const { return label_; }
  std::int64_t union_count(int c) const;

 private:
  int num_classes_, ignore_;
  std::vector<std::int64_t> inter_, pred_, label_;
  std::int64_t valid_ = 0, correct_ = 0;
};

MiouResult miou(const LabelMap& pred, const LabelMap& label, int num_classes, int ignore_index = 255);

/// Pixels of class c with a 4-neighbour of another value. c < 0: any class change.
std::vector<std::uint8_t> boundary_map(const LabelMap& m, int c = -1);

/// Exact squared Euclidean distance to the nearest nonzero pixel (separable lower-envelope
/// transform); +inf everywhere when there is none.
std::vector<double> squared_distance_transform(std::span<const std::uint8_t> features, std::int64_t h, std::int64_t w);

struct Threshold {
  enum class Mode { relative, absolute };
  Mode mode = Mode::relative;
  double value = 0.00088;  // fraction of the diagonal, or pixels

  static Threshold relative(double fraction = 0.00088) { return {Mode::relative, fraction}; }
  static Threshold pixels(double px) { return {Mode::absolute, px}; }
  // Relative thresholds round up to whole pixels (0.00088 of a 2048x1024 diagonal is 3px).
  double resolve(std::int64_t h, std::int64_t w) const;
  std::string describe() const;
};

struct FScore {
  double precision = 0, recall = 0, f = 0;
  std::int64_t pred_points = 0, label_points = 0;
};

/// Matches boundary point sets within `radius` pixels. Both empty: f = 1.
FScore match_boundaries(std::span<const std::uint8_t> pred_b, std::span<const std::uint8_t> label_b, std::int64_t h,
                        std::int64_t w, double radius);

struct BoundaryResult {
  std::vector<std::optional<double>> per_class;  // nullopt: no boundary in either map
  std::optional<double> mean;
};

BoundaryResult boundary_fscore(const LabelMap& pred, const LabelMap& label, int num_classes,
                               Threshold t = Threshold::relative());
/// Union of all class contours, then one match.
FScore imagewise_fscore(const LabelMap& pred, const LabelMap& label, Threshold t = Threshold::relative());

LabelMap center_crop(const LabelMap& m, std::int64_t crop_h, std::int64_t crop_w);
double crop_eval(const LabelMap& pred, const LabelMap& label, std::int64_t crop_h, std::int64_t crop_w,
                 const std::function<double(const LabelMap&, const LabelMap&)>& metric);

// Multiply-accumulate counts (one MAC = one unit).
struct InterLevelFlops {
  std::uint64_t fc = 0;   // four projections
  std::uint64_t dot = 0;  // logits and weighted sum
  std::uint64_t total() const { return fc + dot; }
};
struct SelfAttentionFlops {
  std::uint64_t fc = 0, dot = 0;
  std::uint64_t total() const { return fc + dot; }
};

/// 2 Hh Wh d_hi d_lo + 2 Hl Wl d_lo^2 and 32 d_lo Hh Wh; identical for either direction.
InterLevelFlops flops_interlevel(std::uint64_t d_hi, std::uint64_t d_lo, std::uint64_t h_hi, std::uint64_t w_hi,
                                 std::uint64_t h_lo, std::uint64_t w_lo);
/// 4 H W d^2 + 2 d H^2 W^2.
SelfAttentionFlops flops_selfattention(std::uint64_t h, std::uint64_t w, std::uint64_t d);

struct FlopsComponent {
  std::string name;
  std::uint64_t calls = 0;
  std::uint64_t fc = 0, dot = 0;  // totals over calls
};

struct FlopsReport {
  std::vector<FlopsComponent> components;
  std::uint64_t fc_total = 0, dot_total = 0;
  std::uint64_t selfattention_reference = 0;  // global self-attention at every HILA stage, for comparison
  std::uint64_t total() const { return fc_total + dot_total; }
  nlohmann::json to_json() const;
};

/// Inter-level attention cost of one forward pass of `batch` images of h x w.
FlopsReport config_flops(const ModelConfig& cfg, std::int64_t h, std::int64_t w, std::int64_t batch = 1);

struct EvalSummary {
  MiouResult iou;
  double boundary_f = 0;   // mean over images of the per-class mean
  double imagewise_f = 0;  // mean over images
  Threshold threshold;
  double threshold_px = 0;
  nlohmann::json to_json() const;
};

/// Scores a set of (prediction, label) pairs.
EvalSummary evaluate(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& labels, int num_classes,
                     Threshold t, int ignore_index = 255);

}  // namespace hila
