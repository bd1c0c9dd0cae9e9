#include "hila/checkpoint.hpp"

#include <filesystem>
#include <sstream>

#include "hila/image.hpp"

namespace hila {

namespace {

std::filesystem::path bin_path(const std::string& dir) { return std::filesystem::path(dir) / "params.hilt"; }
std::filesystem::path manifest_path(const std::string& dir) { return std::filesystem::path(dir) / "checkpoint.json"; }

}  // namespace

void save_checkpoint(const std::string& dir, const Model<float>& model, const nlohmann::json& meta) {
  std::filesystem::create_directories(dir);
  std::ostringstream bin;
  nlohmann::json entries = nlohmann::json::array();
  const auto& store = model.params();
  for (std::size_t i = 0; i < store.names().size(); ++i) {
    const auto offset = static_cast<std::int64_t>(bin.tellp());
    const Tensor<float>& t = store.vars()[i].value();
    write_hilt(bin, t);
    entries.push_back({{"name", store.names()[i]}, {"offset", offset}, {"shape", t.shape()}, {"dtype", "f32"}});
  }
  const nlohmann::json manifest = {{"format_version", kCheckpointFormatVersion},
                                   {"config", to_json(model.config())},
                                   {"seed", store.seed()},
                                   {"meta", meta},
                                   {"params", entries}};
  write_file(bin_path(dir).string(), bin.str());
  write_file(manifest_path(dir).string(), manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(manifest_path(dir).string()));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format_version", -1) != kCheckpointFormatVersion) {
    throw DataError("checkpoint manifest: unsupported format_version");
  }
  const std::string bytes = read_file(bin_path(dir).string());
  std::istringstream bin(bytes);
  try {
    Checkpoint ck{config_from_json(manifest.at("config")), ParamStore<float>(manifest.at("seed").get<std::uint64_t>()),
                  manifest.value("meta", nlohmann::json::object())};
    for (const auto& e : manifest.at("params")) {
      const auto name = e.at("name").get<std::string>();
      const auto offset = e.at("offset").get<std::int64_t>();
      if (offset != static_cast<std::int64_t>(bin.tellg())) {
        throw DataError("checkpoint: '" + name + "' expected at byte " + std::to_string(offset) + ", stream is at " +
                        std::to_string(static_cast<long long>(bin.tellg())));
      }
      Tensor<float> t = read_hilt<float>(bin);
      if (t.shape() != e.at("shape").get<Shape>()) throw DataError("checkpoint: shape mismatch for '" + name + "'");
      ck.params.adopt(name, std::move(t));
    }
    if (static_cast<std::size_t>(bin.tellg()) != bytes.size()) throw DataError("checkpoint: trailing bytes in params.hilt");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint manifest: " + std::string(e.what()));
  }
}

Model<float> load_model(const std::string& dir) {
  Checkpoint ck = load_checkpoint(dir);
  return Model<float>(ck.config, std::move(ck.params));
}

}  // namespace hila
