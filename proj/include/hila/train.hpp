#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "hila/data.hpp"
#include "hila/encoder.hpp"
#include "hila/optim.hpp"
#include "hila/rng.hpp"

namespace hila {

struct TrainOptions {
  int steps = 2000;
  int batch = 8;
  double lr = 6e-5;
  double weight_decay = 0.01;
  double power = 1.0;  // poly decay exponent
  int warmup = 0;
  bool augment = true;
  int crop_pad = 8;  // pad-then-random-crop margin; padded labels are ignored
  std::uint64_t seed = 0;
  int log_every = 0;
};

/// Non-finite loss or gradient; diagnostics() names the step, batch and offending tensors.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, nlohmann::json diagnostics)
      : Error(what), diagnostics_(std::move(diagnostics)) {}
  const nlohmann::json& diagnostics() const { return diagnostics_; }

 private:
  nlohmann::json diagnostics_;
};

struct TrainLog {
  int step = 0;
  double loss = 0, lr = 0;
};

struct TrainResult {
  std::vector<double> losses;  // one per step
  double seconds = 0;
};

struct Batch {
  Tensor<float> images;  // [B,H,W,3]
  std::vector<std::uint8_t> labels;
  std::int64_t h = 0, w = 0;
};

/// Stacks the chosen samples. With `aug`, each is flipped horizontally with probability 1/2
/// and cropped back to size from a copy padded by `pad` on every side.
Batch make_batch(const std::vector<SegSample>& data, std::span<const std::size_t> idx, Rng* aug = nullptr,
                 int pad = 0, int ignore_index = 255);

/// AdamW with poly decay over opt.steps; batches follow seeded per-epoch shuffles.
TrainResult train_model(Model<float>& model, const std::vector<SegSample>& data, const TrainOptions& opt,
                        const std::function<void(const TrainLog&)>& on_log = {});

/// Full-resolution class maps.
std::vector<LabelMap> predict(const Model<float>& model, const std::vector<SegSample>& data, int batch = 8);

std::vector<LabelMap> labels_of(const std::vector<SegSample>& data);

}  // namespace hila
