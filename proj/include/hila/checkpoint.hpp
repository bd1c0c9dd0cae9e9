#pragma once

#include <string>

#include "json.hpp"

#include "hila/encoder.hpp"

namespace hila {

inline constexpr int kCheckpointFormatVersion = 1;

/// A checkpoint directory holds params.hilt (the parameters as back-to-back HILT records,
/// in store order) and checkpoint.json (config, free-form metadata, and for every
/// parameter its name, byte offset, shape and dtype).
struct Checkpoint {
  ModelConfig config;
  ParamStore<float> params;
  nlohmann::json meta;
};

void save_checkpoint(const std::string& dir, const Model<float>& model, const nlohmann::json& meta = nlohmann::json::object());
Checkpoint load_checkpoint(const std::string& dir);
Model<float> load_model(const std::string& dir);

}  // namespace hila
