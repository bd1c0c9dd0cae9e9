#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "hila/errors.hpp"

namespace hila {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

/// Dense row-major array. Layout convention for feature maps is B x H x W x C.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> data);

  static Tensor full(Shape shape, T value);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  // Negative indices count from the back.
  std::int64_t dim(int i) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return shape_.empty() && data_.empty(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const T* ptr() const { return data_.data(); }
  T* ptr() { return data_.data(); }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Scalar accessor for rank-0/size-1 tensors.
  T item() const;

  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Square window mapping a lower-level grid onto a higher-level one.
struct PatchGeometry {
  int kernel = 4;
  int stride = 2;
  int padding = 1;

  int slots() const { return kernel * kernel; }
  // Output extent along one axis; throws GeometryError when not integral.
  std::int64_t out_extent(std::int64_t in) const;
  // Window for the given patch-size p under stride 2 (padding (p-2)/2).
  static PatchGeometry for_patch(int p);
  bool operator==(const PatchGeometry&) const = default;
};

// HILT binary tensor format: "HILT", u8 dtype, u8 rank, u32 LE extents, LE payload.
template <typename T>
void write_hilt(std::ostream& os, const Tensor<T>& t);
template <typename T>
Tensor<T> read_hilt(std::istream& is);
template <typename T>
void save_hilt(const std::string& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_hilt(const std::string& path);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace hila
