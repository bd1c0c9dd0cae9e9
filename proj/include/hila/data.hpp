#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "hila/image.hpp"

namespace hila {

struct SegSample {
  Tensor<float> image;  // [H,W,3], values in [0,1] on the 8-bit grid
  LabelMap labels;
};

/// Synthetic scenes: class 0 is a textured background; classes 1, 2, 3 are rectangles,
/// discs and 3px-wide bars (further classes cycle through the same kinds).
struct ShapesSpec {
  int image_size = 64;
  int num_classes = 4;
  int min_shapes = 2, max_shapes = 5;
  int min_size = 10, max_size = 28;
  double noise_std = 0.04;  // also the amplitude of the background texture
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError
  bool operator==(const ShapesSpec&) const = default;
};

inline constexpr int kBarWidth = 3;
inline constexpr int kDatasetFormatVersion = 1;

enum class ShapeKind { rectangle, disc, bar };
ShapeKind kind_of_class(int c);  // c >= 1

/// Sample `index` of the stream defined by spec.seed; independent of other indices.
SegSample generate_sample(const ShapesSpec& spec, std::int64_t index);
std::vector<SegSample> generate_shapes(const ShapesSpec& spec, std::int64_t n, std::int64_t first_index = 0);

nlohmann::json to_json(const ShapesSpec& spec);
ShapesSpec shapes_spec_from_json(const nlohmann::json& j);

/// img_%05d.ppm + lab_%05d.pgm + manifest.json.
void save_dataset(const std::string& dir, const ShapesSpec& spec, const std::vector<SegSample>& samples);
struct Dataset {
  ShapesSpec spec;
  std::vector<SegSample> samples;
};
Dataset load_dataset(const std::string& dir);

}  // namespace hila
