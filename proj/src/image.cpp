#include "hila/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hila {

namespace {

struct PnmHeader {
  std::int64_t w = 0, h = 0;
  std::size_t payload = 0;  // offset of the first sample
};

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view b) : b_(b) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(what + " at byte " + std::to_string(pos_));
  }

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      const char c = b_[pos_];
      if (c == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::int64_t number(const char* what) {
    skip_space_and_comments();
    if (pos_ >= b_.size()) fail(std::string("unexpected end of header reading ") + what);
    if (b_[pos_] < '0' || b_[pos_] > '9') fail(std::string("expected ") + what);
    std::int64_t v = 0;
    while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
      v = v * 10 + (b_[pos_] - '0');
      if (v > (1 << 24)) fail(std::string(what) + " too large");
      ++pos_;
    }
    return v;
  }

  PnmHeader parse(char kind) {
    if (b_.size() < 2 || b_[0] != 'P' || b_[1] != kind) fail(std::string("expected magic P") + kind);
    pos_ = 2;
    PnmHeader h;
    h.w = number("width");
    h.h = number("height");
    const std::int64_t maxval = number("maxval");
    if (maxval != 255) fail("unsupported maxval " + std::to_string(maxval));
    if (pos_ >= b_.size() || !(b_[pos_] == ' ' || b_[pos_] == '\n' || b_[pos_] == '\t' || b_[pos_] == '\r')) {
      fail("expected whitespace before pixel data");
    }
    ++pos_;
    if (h.w <= 0 || h.h <= 0) fail("empty image");
    h.payload = pos_;
    return h;
  }

  std::size_t pos() const { return pos_; }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

std::string header(char kind, std::int64_t w, std::int64_t h) {
  return std::string("P") + kind + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

void check_payload(std::string_view bytes, const PnmHeader& h, std::int64_t channels) {
  const auto need = static_cast<std::size_t>(h.w * h.h * channels);
  if (bytes.size() - h.payload < need) {
    throw ParseError("truncated pixel data at byte " + std::to_string(bytes.size()) + ": expected " +
                     std::to_string(need) + " bytes from offset " + std::to_string(h.payload));
  }
}

}  // namespace

std::string encode_ppm(const Image& img) {
  if (static_cast<std::int64_t>(img.rgb.size()) != img.h * img.w * 3) throw ShapeError("image buffer size mismatch");
  std::string out = header('6', img.w, img.h);
  out.append(img.rgb.begin(), img.rgb.end());
  return out;
}

Image decode_ppm(std::string_view bytes) {
  HeaderReader r(bytes);
  const PnmHeader h = r.parse('6');
  check_payload(bytes, h, 3);
  Image img(h.h, h.w);
  std::copy_n(bytes.data() + h.payload, img.rgb.size(), img.rgb.begin());
  return img;
}

std::string encode_pgm(const LabelMap& labels) {
  if (static_cast<std::int64_t>(labels.v.size()) != labels.h * labels.w) throw ShapeError("label buffer size mismatch");
  std::string out = header('5', labels.w, labels.h);
  out.reserve(out.size() + labels.v.size());
  for (int id : labels.v) {
    if (id < 0 || id > 255) throw DataError("label id " + std::to_string(id) + " does not fit in 8 bits");
    out.push_back(static_cast<char>(id));
  }
  return out;
}

LabelMap decode_pgm(std::string_view bytes) {
  HeaderReader r(bytes);
  const PnmHeader h = r.parse('5');
  check_payload(bytes, h, 1);
  LabelMap m(h.h, h.w);
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<std::uint8_t>(bytes[h.payload + i]);
  return m;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to '" + path + "'");
}

void write_ppm(const std::string& path, const Image& img) { write_file(path, encode_ppm(img)); }
Image read_ppm(const std::string& path) { return decode_ppm(read_file(path)); }
void write_labels(const std::string& path, const LabelMap& labels) { write_file(path, encode_pgm(labels)); }
LabelMap read_labels(const std::string& path) { return decode_pgm(read_file(path)); }

Tensor<float> image_to_tensor(const Image& img) {
  Tensor<float> t({img.h, img.w, 3});
  for (std::size_t i = 0; i < img.rgb.size(); ++i) t[static_cast<std::int64_t>(i)] = img.rgb[i] / 255.0f;
  return t;
}

Image tensor_to_image(const Tensor<float>& t) {
  if (t.rank() != 3 || t.dim(2) != 3) throw ShapeError("expected [H,W,3], got " + shape_str(t.shape()));
  Image img(t.dim(0), t.dim(1));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const float v = std::clamp(t[i], 0.0f, 1.0f);
    img.rgb[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return img;
}

}  // namespace hila
