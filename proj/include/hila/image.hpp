#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "hila/tensor.hpp"

namespace hila {

/// 8-bit interleaved RGB.
struct Image {
  std::int64_t h = 0, w = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::int64_t h_, std::int64_t w_) : h(h_), w(w_), rgb(static_cast<std::size_t>(h_ * w_ * 3), 0) {}
  std::uint8_t* px(std::int64_t y, std::int64_t x) { return rgb.data() + (y * w + x) * 3; }
  const std::uint8_t* px(std::int64_t y, std::int64_t x) const { return rgb.data() + (y * w + x) * 3; }
  bool operator==(const Image&) const = default;
};

/// Per-pixel class ids; 255 is the conventional ignore label.
struct LabelMap {
  std::int64_t h = 0, w = 0;
  std::vector<int> v;

  LabelMap() = default;
  LabelMap(std::int64_t h_, std::int64_t w_, int fill = 0) : h(h_), w(w_), v(static_cast<std::size_t>(h_ * w_), fill) {}
  int& at(std::int64_t y, std::int64_t x) { return v[static_cast<std::size_t>(y * w + x)]; }
  int at(std::int64_t y, std::int64_t x) const { return v[static_cast<std::size_t>(y * w + x)]; }
  bool operator==(const LabelMap&) const = default;
};

// Binary P6 / P5 with maxval 255. Decoders throw ParseError naming the byte offset.
std::string encode_ppm(const Image& img);
Image decode_ppm(std::string_view bytes);
std::string encode_pgm(const LabelMap& labels);  // DataError for ids outside [0, 255]
LabelMap decode_pgm(std::string_view bytes);

void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);
void write_labels(const std::string& path, const LabelMap& labels);
LabelMap read_labels(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

/// [H,W,3] floats in [0,1] <-> 8-bit (rounded, clamped).
Tensor<float> image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor<float>& t);

}  // namespace hila
