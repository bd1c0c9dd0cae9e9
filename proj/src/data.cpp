#include "hila/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "hila/rng.hpp"

namespace hila {

namespace {

// Well-separated base colors; index 0 is the background.
constexpr std::array<std::array<float, 3>, 8> kPalette{{{0.50f, 0.50f, 0.46f},
                                                        {0.85f, 0.25f, 0.20f},
                                                        {0.20f, 0.70f, 0.30f},
                                                        {0.20f, 0.35f, 0.90f},
                                                        {0.90f, 0.80f, 0.20f},
                                                        {0.70f, 0.30f, 0.80f},
                                                        {0.20f, 0.80f, 0.80f},
                                                        {0.95f, 0.55f, 0.75f}}};

std::array<float, 3> base_color(int c) {
  if (c < static_cast<int>(kPalette.size())) return kPalette[static_cast<std::size_t>(c)];
  // Beyond the palette: deterministic but still distinct hues.
  const double h = std::fmod(c * 0.618033988749895, 1.0);
  return {static_cast<float>(0.5 + 0.4 * std::cos(6.283185307179586 * h)),
          static_cast<float>(0.5 + 0.4 * std::cos(6.283185307179586 * (h + 1.0 / 3))),
          static_cast<float>(0.5 + 0.4 * std::cos(6.283185307179586 * (h + 2.0 / 3)))};
}

std::uint64_t sample_seed(std::uint64_t seed, std::int64_t index) {
  std::uint64_t s = seed ^ (0xD1B54A32D192ED03ULL * static_cast<std::uint64_t>(index + 1));
  return splitmix64(s);
}

}  // namespace

void ShapesSpec::validate() const {
  if (image_size <= 0 || image_size % 32 != 0) throw ConfigError("image_size must be a positive multiple of 32");
  if (num_classes < 2 || num_classes > 255) throw ConfigError("num_classes must be in [2, 255]");
  if (min_shapes < 0 || max_shapes < min_shapes) throw ConfigError("need 0 <= min_shapes <= max_shapes");
  if (min_size < 1 || max_size < min_size || max_size > image_size) {
    throw ConfigError("need 1 <= min_size <= max_size <= image_size");
  }
  if (!(noise_std >= 0)) throw ConfigError("noise_std must be non-negative");
}

ShapeKind kind_of_class(int c) {
  switch ((c - 1) % 3) {
    case 0:
      return ShapeKind::rectangle;
    case 1:
      return ShapeKind::disc;
    default:
      return ShapeKind::bar;
  }
}

SegSample generate_sample(const ShapesSpec& spec, std::int64_t index) {
  spec.validate();
  Rng rng(sample_seed(spec.seed, index));
  const std::int64_t n = spec.image_size;
  LabelMap labels(n, n, 0);

  const auto shapes = rng.randint(spec.min_shapes, spec.max_shapes);
  for (std::int64_t s = 0; s < shapes; ++s) {
    const int c = static_cast<int>(rng.randint(1, spec.num_classes - 1));
    switch (kind_of_class(c)) {
      case ShapeKind::rectangle: {
        const auto h = rng.randint(spec.min_size, spec.max_size), w = rng.randint(spec.min_size, spec.max_size);
        const auto y0 = rng.randint(0, n - h), x0 = rng.randint(0, n - w);
        for (std::int64_t y = y0; y < y0 + h; ++y)
          for (std::int64_t x = x0; x < x0 + w; ++x) labels.at(y, x) = c;
        break;
      }
      case ShapeKind::disc: {
        const auto r = rng.randint(std::max(1, spec.min_size / 2), std::max(1, spec.max_size / 2));
        const auto cy = rng.randint(0, n - 1), cx = rng.randint(0, n - 1);
        for (std::int64_t y = std::max<std::int64_t>(0, cy - r); y <= std::min(n - 1, cy + r); ++y)
          for (std::int64_t x = std::max<std::int64_t>(0, cx - r); x <= std::min(n - 1, cx + r); ++x)
            if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) labels.at(y, x) = c;
        break;
      }
      case ShapeKind::bar: {
        const auto len = rng.randint(spec.max_size, std::max<std::int64_t>(spec.max_size, n * 3 / 4));
        const bool vertical = rng.randint(0, 1) == 1;
        const auto along = rng.randint(0, n - len), across = rng.randint(0, n - kBarWidth);
        for (std::int64_t i = along; i < along + len; ++i)
          for (std::int64_t j = across; j < across + kBarWidth; ++j) (vertical ? labels.at(i, j) : labels.at(j, i)) = c;
        break;
      }
    }
  }

  // Per-image color jitter, a low-frequency background texture and pixel noise; all
  // values are snapped to the 8-bit grid so the dataset round-trips through PPM.
  std::vector<std::array<float, 3>> colors(static_cast<std::size_t>(spec.num_classes));
  for (int c = 0; c < spec.num_classes; ++c) {
    colors[static_cast<std::size_t>(c)] = base_color(c);
    for (auto& v : colors[static_cast<std::size_t>(c)]) v += static_cast<float>(rng.uniform(-0.05, 0.05));
  }
  const double fy = rng.uniform(0.05, 0.25), fx = rng.uniform(0.05, 0.25), phase = rng.uniform(0, 6.283185307179586);
  Tensor<float> img({n, n, 3});
  for (std::int64_t y = 0; y < n; ++y) {
    for (std::int64_t x = 0; x < n; ++x) {
      const int c = labels.at(y, x);
      const double texture = c == 0 ? spec.noise_std * std::sin(fy * double(y) + fx * double(x) + phase) : 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        double v = colors[static_cast<std::size_t>(c)][static_cast<std::size_t>(ch)] + texture;
        if (spec.noise_std > 0) v += spec.noise_std * rng.normal();
        v = std::clamp(v, 0.0, 1.0);
        img[(y * n + x) * 3 + ch] = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
      }
    }
  }
  return {std::move(img), std::move(labels)};
}

std::vector<SegSample> generate_shapes(const ShapesSpec& spec, std::int64_t n, std::int64_t first_index) {
  spec.validate();
  if (n < 1) throw ConfigError("sample count must be at least 1");
  std::vector<SegSample> out(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = generate_sample(spec, first_index + i);
  return out;
}

nlohmann::json to_json(const ShapesSpec& s) {
  return {{"image_size", s.image_size}, {"num_classes", s.num_classes}, {"min_shapes", s.min_shapes},
          {"max_shapes", s.max_shapes}, {"min_size", s.min_size},       {"max_size", s.max_size},
          {"noise_std", s.noise_std},   {"seed", s.seed}};
}

ShapesSpec shapes_spec_from_json(const nlohmann::json& j) {
  ShapesSpec s;
  try {
    for (const auto& [k, _] : j.items()) {
      if (!to_json(s).contains(k)) throw ConfigError("shapes spec: unknown field '" + k + "'");
    }
    s.image_size = j.at("image_size").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    s.min_shapes = j.at("min_shapes").get<int>();
    s.max_shapes = j.at("max_shapes").get<int>();
    s.min_size = j.at("min_size").get<int>();
    s.max_size = j.at("max_size").get<int>();
    s.noise_std = j.at("noise_std").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("shapes spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

std::string numbered(const std::string& dir, const char* prefix, std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu.%s", prefix, i, ext);
  return (std::filesystem::path(dir) / buf).string();
}

}  // namespace

void save_dataset(const std::string& dir, const ShapesSpec& spec, const std::vector<SegSample>& samples) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    write_ppm(numbered(dir, "img", i, "ppm"), tensor_to_image(samples[i].image));
    write_labels(numbered(dir, "lab", i, "pgm"), samples[i].labels);
  }
  const nlohmann::json manifest = {
      {"spec", to_json(spec)}, {"n", samples.size()}, {"format_version", kDatasetFormatVersion}};
  write_file((std::filesystem::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  const std::string text = read_file((std::filesystem::path(dir) / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("dataset manifest: " + std::string(e.what()));
  }
  if (!manifest.contains("format_version") || manifest["format_version"] != kDatasetFormatVersion) {
    throw DataError("dataset manifest: unsupported format_version");
  }
  Dataset ds;
  std::size_t n = 0;
  try {
    ds.spec = shapes_spec_from_json(manifest.at("spec"));
    n = manifest.at("n").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dataset manifest: " + std::string(e.what()));
  }
  ds.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = ds.samples[i];
    s.image = image_to_tensor(read_ppm(numbered(dir, "img", i, "ppm")));
    s.labels = read_labels(numbered(dir, "lab", i, "pgm"));
    if (s.labels.h != s.image.dim(0) || s.labels.w != s.image.dim(1)) {
      throw DataError("sample " + std::to_string(i) + ": image and label sizes differ");
    }
    for (int v : s.labels.v) {
      if (v != 255 && v >= ds.spec.num_classes) throw DataError("sample " + std::to_string(i) + ": label id out of range");
    }
  }
  return ds;
}

}  // namespace hila
