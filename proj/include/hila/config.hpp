#pragma once

#include <array>
#include <string>

#include "json.hpp"

#include "hila/tensor.hpp"

namespace hila {

struct StageConfig {
  int K = 3;        // patch-merging kernel
  int S = 2;        // patch-merging stride
  int d = 32;       // channels
  int N = 2;        // blocks
  int H = 1;        // attention heads
  int E = 4;        // FFN expansion
  int R = 1;        // spatial reduction ratio
  bool hila = false;
  double alpha = 0.5;
  double beta = 0.5;
  int s_stride = 1;  // wrap every s_stride-th block
  int p_patch = 4;   // inter-level window side

  PatchGeometry geometry() const { return PatchGeometry::for_patch(p_patch); }
  bool wraps_block(int i) const { return hila && i % s_stride == 0; }  // i is 1-based
  bool operator==(const StageConfig&) const = default;
};

struct ModelConfig {
  std::array<StageConfig, 4> stages;
  int num_classes = 4;
  int decode_dim = 64;
  int input_channels = 3;

  // Throws ConfigError naming the offending stage/field.
  void validate() const;
  bool any_hila() const;
  bool operator==(const ModelConfig&) const = default;
};

/// dims (16,32,64,128), two blocks per stage, heads (1,1,2,4), reductions (4,2,1,1),
/// HILA on stages 2-4.
ModelConfig tiny_config();

nlohmann::json to_json(const ModelConfig& cfg);
// Rejects unknown or missing fields.
ModelConfig config_from_json(const nlohmann::json& j);
ModelConfig load_config(const std::string& path);
ModelConfig parse_config(const std::string& text);

}  // namespace hila
