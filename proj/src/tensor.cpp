#include "hila/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace hila {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

template <typename T>
Tensor<T>::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), T(0)) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " does not match buffer of " +
                     std::to_string(data_.size()) + " elements");
  }
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

template <typename T>
std::int64_t Tensor<T>::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("dim index out of range for shape " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

std::int64_t PatchGeometry::out_extent(std::int64_t in) const {
  const std::int64_t span = in + 2 * padding - kernel;
  if (span < 0 || span % stride != 0) {
    throw GeometryError("window k=" + std::to_string(kernel) + " s=" + std::to_string(stride) +
                        " p=" + std::to_string(padding) + " does not tile extent " +
                        std::to_string(in));
  }
  return span / stride + 1;
}

PatchGeometry PatchGeometry::for_patch(int p) {
  if (p < 2 || p % 2 != 0) throw ConfigError("patch size must be even and >= 2, got " + std::to_string(p));
  return PatchGeometry{p, 2, (p - 2) / 2};
}

namespace {

static_assert(std::endian::native == std::endian::little, "HILT I/O assumes a little-endian host");

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

}  // namespace

template <typename T>
void write_hilt(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw ShapeError("rank too large for HILT");
  os.write("HILT", 4);
  const auto tag = static_cast<std::uint8_t>(dtype_of<T>());
  const auto rank = static_cast<std::uint8_t>(t.rank());
  os.put(static_cast<char>(tag));
  os.put(static_cast<char>(rank));
  for (auto e : t.shape()) write_u32(os, static_cast<std::uint32_t>(e));
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw Error("failed writing HILT tensor");
}

template <typename T>
Tensor<T> read_hilt(std::istream& is) {
  const auto start = is.tellg();
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "HILT", 4) != 0) {
    throw ParseError("bad HILT magic at offset " + std::to_string(static_cast<long long>(start)));
  }
  const int tag = is.get();
  const int rank = is.get();
  if (!is) throw ParseError("truncated HILT header");
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& e : shape) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw ParseError("truncated HILT extents");
    e = v;
  }
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  auto read_as = [&](auto zero) {
    using U = decltype(zero);
    std::vector<U> buf(n);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(U)))) {
      throw ParseError("truncated HILT payload");
    }
    return std::vector<T>(buf.begin(), buf.end());
  };
  if (tag == 0) return Tensor<T>(std::move(shape), read_as(float{}));
  if (tag == 1) return Tensor<T>(std::move(shape), read_as(double{}));
  throw ParseError("unknown HILT dtype tag " + std::to_string(tag));
}

template <typename T>
void save_hilt(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_hilt(os, t);
}

template <typename T>
Tensor<T> load_hilt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  return read_hilt<T>(is);
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  T m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

#define HILA_INSTANTIATE(T)                                          \
  template class Tensor<T>;                                          \
  template void write_hilt<T>(std::ostream&, const Tensor<T>&);     \
  template Tensor<T> read_hilt<T>(std::istream&);                    \
  template void save_hilt<T>(const std::string&, const Tensor<T>&); \
  template Tensor<T> load_hilt<T>(const std::string&);               \
  template T max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);

HILA_INSTANTIATE(float)
HILA_INSTANTIATE(double)
#undef HILA_INSTANTIATE

}  // namespace hila
