#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hila/config.hpp"

namespace hila {

struct SuiteResult {
  std::string name;
  bool passed = true;
  std::vector<std::string> failures;
  std::map<std::string, double> metrics;  // worst errors, counts, ...
  double seconds = 0;

  void expect(bool ok, const std::string& what);
};

struct CheckOptions {
  std::uint64_t seed = 0;
  bool float64 = false;   // composed gradient tolerance 1e-5 instead of 1e-3 (checks run in double regardless)
  int oracle_configs = 50;
  int gradient_probes = 20;
};

// Top-down patch-wise attention against the per-pixel reference on random lower maps up to
// 8x12 (both precisions).
SuiteResult check_oracle(const ModelConfig& cfg, const CheckOptions& opt);
// Bottom-up rows, folded top-down weights and composed hierarchy masks sum to one;
// composed supports stay inside their receptive windows.
SuiteResult check_normalization(const ModelConfig& cfg, const CheckOptions& opt);
// <unfold x, y> = <x, fold y> and the bilinear resize pair.
SuiteResult check_adjointness(const ModelConfig& cfg, const CheckOptions& opt);
// Central differences: every differentiable op, one HILA-wrapped stage, the whole model.
SuiteResult check_gradients(const ModelConfig& cfg, const CheckOptions& opt);
// Wrapped/top-down block placement and the shared-parameter count.
SuiteResult check_schedule(const ModelConfig& cfg, const CheckOptions& opt);
// Closed-form inter-level cost against the MAC counter at 32x32 and 64x64.
SuiteResult check_flops(const ModelConfig& cfg, const CheckOptions& opt);

std::vector<SuiteResult> run_checks(const ModelConfig& cfg, const CheckOptions& opt);

// Hand-derived parameter overhead of enabling HILA on stage `stage` (1-based, >= 2).
std::int64_t hila_param_overhead(const ModelConfig& cfg, int stage);

}  // namespace hila
