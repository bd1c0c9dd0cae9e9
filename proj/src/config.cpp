#include "hila/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace hila {

namespace {

const std::set<std::string> kStageFields = {"K", "S", "d", "N", "H", "E", "R", "hila", "alpha", "beta", "s_stride",
                                            "p_patch"};
const std::set<std::string> kModelFields = {"num_classes", "decode_dim", "stages", "input_channels"};

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown field '" + key + "'");
  }
}

template <typename V>
V field(const nlohmann::json& j, const char* name, const std::string& where) {
  if (!j.contains(name)) throw ConfigError(where + ": missing field '" + name + "'");
  try {
    return j.at(name).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": field '" + name + "' has the wrong type");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (num_classes < 2 || num_classes > 255) throw ConfigError("num_classes must be in [2, 255]");
  if (decode_dim < 1) throw ConfigError("decode_dim must be positive");
  if (input_channels < 1) throw ConfigError("input_channels must be positive");
  const int ladder[4] = {4, 2, 2, 2};
  for (int i = 0; i < 4; ++i) {
    const auto& s = stages[static_cast<std::size_t>(i)];
    const std::string where = "stage " + std::to_string(i + 1);
    for (auto [v, name] : {std::pair{s.K, "K"}, {s.S, "S"}, {s.d, "d"}, {s.N, "N"}, {s.H, "H"}, {s.E, "E"}, {s.R, "R"},
                           {s.s_stride, "s_stride"}, {s.p_patch, "p_patch"}}) {
      if (v < 1) throw ConfigError(where + ": " + name + " must be positive");
    }
    if (s.S != ladder[i]) {
      throw ConfigError(where + ": S must be " + std::to_string(ladder[i]) + " to keep the 1/4..1/32 resolution ladder");
    }
    if (s.K < s.S) throw ConfigError(where + ": K must be >= S");
    if (s.d % s.H != 0) throw ConfigError(where + ": d=" + std::to_string(s.d) + " not divisible by H=" + std::to_string(s.H));
    if (s.p_patch % 2 != 0) throw ConfigError(where + ": p_patch must be even, got " + std::to_string(s.p_patch));
    if (s.alpha < 0 || s.beta < 0) throw ConfigError(where + ": alpha and beta must be non-negative");
    if (s.hila && i == 0) throw ConfigError("stage 1: HILA needs a lower stage and cannot be enabled here");
  }
}

bool ModelConfig::any_hila() const {
  for (const auto& s : stages)
    if (s.hila) return true;
  return false;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  const int dims[4] = {16, 32, 64, 128};
  const int heads[4] = {1, 1, 2, 4};
  const int reductions[4] = {4, 2, 1, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    auto& s = cfg.stages[i];
    s.K = i == 0 ? 7 : 3;
    s.S = i == 0 ? 4 : 2;
    s.d = dims[i];
    s.N = 2;
    s.H = heads[i];
    s.E = 4;
    s.R = reductions[i];
    s.hila = i > 0;
  }
  cfg.num_classes = 4;
  cfg.decode_dim = 64;
  return cfg;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : cfg.stages) {
    stages.push_back({{"K", s.K}, {"S", s.S}, {"d", s.d}, {"N", s.N}, {"H", s.H}, {"E", s.E}, {"R", s.R},
                      {"hila", s.hila}, {"alpha", s.alpha}, {"beta", s.beta}, {"s_stride", s.s_stride},
                      {"p_patch", s.p_patch}});
  }
  return {{"num_classes", cfg.num_classes},
          {"decode_dim", cfg.decode_dim},
          {"input_channels", cfg.input_channels},
          {"stages", stages}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  reject_unknown(j, kModelFields, "config");
  ModelConfig cfg;
  cfg.num_classes = field<int>(j, "num_classes", "config");
  cfg.decode_dim = field<int>(j, "decode_dim", "config");
  if (j.contains("input_channels")) cfg.input_channels = field<int>(j, "input_channels", "config");
  const auto& stages = j.contains("stages") ? j.at("stages") : throw ConfigError("config: missing field 'stages'");
  if (!stages.is_array() || stages.size() != 4) throw ConfigError("config: 'stages' must list exactly 4 stages");
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string where = "stage " + std::to_string(i + 1);
    const auto& sj = stages[i];
    reject_unknown(sj, kStageFields, where);
    auto& s = cfg.stages[i];
    s.K = field<int>(sj, "K", where);
    s.S = field<int>(sj, "S", where);
    s.d = field<int>(sj, "d", where);
    s.N = field<int>(sj, "N", where);
    s.H = field<int>(sj, "H", where);
    s.E = field<int>(sj, "E", where);
    s.R = field<int>(sj, "R", where);
    s.hila = field<bool>(sj, "hila", where);
    s.alpha = field<double>(sj, "alpha", where);
    s.beta = field<double>(sj, "beta", where);
    s.s_stride = field<int>(sj, "s_stride", where);
    s.p_patch = field<int>(sj, "p_patch", where);
  }
  cfg.validate();
  return cfg;
}

ModelConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("config JSON: ") + e.what());
  }
  return config_from_json(j);
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace hila
