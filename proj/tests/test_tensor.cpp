#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "hila/kernels.hpp"
#include "hila/kernels_serial.hpp"
#include "hila/mac_counter.hpp"
#include "hila/tensor.hpp"

using namespace hila;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, unsigned seed, T lo = -1, T hi = 1) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(gen));
  return t;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

}  // namespace

TEST_CASE("tensor construction and shape checks") {
  Tensor<float> t(Shape{2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(t.reshaped(Shape{4}), ShapeError);
  CHECK(t.reshaped(Shape{3, 2}).shape() == Shape{3, 2});
}

TEST_CASE("HILT round trip and header") {
  auto t = random_tensor<double>({2, 3, 4}, 1);
  std::stringstream ss;
  write_hilt(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "HILT");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  CHECK(static_cast<unsigned char>(bytes[5]) == 3);
  CHECK(bytes.size() == 4 + 2 + 3 * 4 + 24 * 8);
  auto back = read_hilt<double>(ss);
  CHECK(back.shape() == t.shape());
  CHECK(max_abs_diff(back, t) == 0.0);

  std::stringstream bad("HILX");
  CHECK_THROWS_AS(read_hilt<float>(bad), ParseError);
  std::stringstream truncated(bytes.substr(0, 20));
  CHECK_THROWS_AS(read_hilt<double>(truncated), ParseError);
}

TEST_CASE("matmul") {
  Tensor<float> eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor<float> m(Shape{2, 2}, {1, 2, 3, 4});
  CHECK(max_abs_diff(kernels::matmul(eye, m), m) == 0.0f);
  Tensor<float> r(Shape{1, 2}, {1, 2});
  Tensor<float> c(Shape{2, 1}, {3, 4});
  CHECK(kernels::matmul(r, c).item() == 11.0f);

  auto a = random_tensor<float>({3, 4}, 2);
  auto b = random_tensor<float>({4, 5}, 3);
  auto y = kernels::matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      double s = 0;
      for (int p = 0; p < 4; ++p) s += double(a[i * 4 + p]) * double(b[p * 5 + j]);
      CHECK(std::abs(y[i * 5 + j] - s) < 1e-6);
    }

  CHECK_THROWS_AS(kernels::matmul(a, a), ShapeError);
  try {
    kernels::matmul(a, a);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[3,4]") != std::string::npos);
  }
}

TEST_CASE("matmul transposes and broadcasting") {
  auto a = random_tensor<double>({2, 3, 4, 5}, 4);
  auto b = random_tensor<double>({3, 6, 5}, 5);
  auto y = kernels::matmul(a, b, false, true);
  REQUIRE(y.shape() == Shape{2, 3, 4, 6});
  for (int n = 0; n < 2; ++n)
    for (int h = 0; h < 3; ++h)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j) {
          double s = 0;
          for (int p = 0; p < 5; ++p) s += a[((n * 3 + h) * 4 + i) * 5 + p] * b[(h * 6 + j) * 5 + p];
          CHECK(std::abs(y[((n * 3 + h) * 4 + i) * 6 + j] - s) < 1e-12);
        }
  auto at = random_tensor<double>({5, 4}, 6);
  auto bt = random_tensor<double>({5, 3}, 7);
  auto z = kernels::matmul(at, bt, true, false);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int p = 0; p < 5; ++p) s += at[p * 4 + i] * bt[p * 3 + j];
      CHECK(std::abs(z[i * 3 + j] - s) < 1e-12);
    }
}

TEST_CASE("gemm matches serial reference") {
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      auto a = random_tensor<float>({37 * 29}, 8);
      auto b = random_tensor<float>({29 * 41}, 9);
      std::vector<float> c1(37 * 41), c2(37 * 41);
      kernels::gemm<float>(37, 41, 29, a.ptr(), ta, b.ptr(), tb, c1.data(), false);
      kernels::serial::gemm<float>(37, 41, 29, a.ptr(), ta, b.ptr(), tb, c2.data(), false);
      for (std::size_t i = 0; i < c1.size(); ++i) CHECK(std::abs(c1[i] - c2[i]) < 1e-5);
    }
}

TEST_CASE("softmax") {
  Tensor<double> u(Shape{4}, {0, 0, 0, 0});
  auto y = kernels::softmax_lastdim(u);
  for (int i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(0.25));
  Tensor<double> big(Shape{2}, {1000, 0});
  auto yb = kernels::softmax_lastdim(big);
  CHECK(std::abs(yb[0] - 1.0) < 1e-12);
  CHECK(std::abs(yb[1]) < 1e-12);
  CHECK(yb.all_finite());

  auto x = random_tensor<double>({16}, 10, -3, 3);
  auto ys = kernels::softmax_lastdim(x);
  double z = 0;
  for (int i = 0; i < 16; ++i) z += std::exp(x[i]);
  for (int i = 0; i < 16; ++i) CHECK(std::abs(ys[i] - std::exp(x[i]) / z) < 1e-12);

  auto rows = random_tensor<float>({7, 9}, 11, -5, 5);
  auto yr = kernels::softmax_lastdim(rows);
  auto shifted = rows;
  for (auto& v : shifted.data()) v += 3.5f;
  auto ysh = kernels::softmax_lastdim(shifted);
  for (int r = 0; r < 7; ++r) {
    double s = 0;
    for (int j = 0; j < 9; ++j) s += yr[r * 9 + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  CHECK(max_abs_diff(yr, ysh) < 1e-6f);
  CHECK(max_abs_diff(yr, kernels::serial::softmax_lastdim(rows)) < 1e-6f);
}

TEST_CASE("softmax with keep-mask") {
  Tensor<double> x(Shape{2, 4}, {1, 2, 3, 4, 1, 2, 3, 4});
  std::vector<std::uint8_t> mask{1, 0, 1, 0, 0, 0, 0, 1};
  auto y = kernels::softmax_lastdim(x, mask);
  CHECK(y[1] == 0.0);
  CHECK(y[3] == 0.0);
  CHECK(y[0] + y[2] == doctest::Approx(1.0));
  CHECK(y[7] == 1.0);
}

TEST_CASE("layer norm") {
  Tensor<double> ones(Shape{1}, {1});
  Tensor<double> zero(Shape{1}, {0});
  Tensor<double> g4 = Tensor<double>::full({4}, 1), b4(Shape{4});
  auto y0 = kernels::layer_norm(Tensor<double>::full({4}, 3.0), g4, b4, 1e-6);
  for (auto v : y0.data()) CHECK(v == 0.0);

  Tensor<double> g2 = Tensor<double>::full({2}, 1), b2(Shape{2});
  auto y1 = kernels::layer_norm(Tensor<double>(Shape{2}, {1, 3}), g2, b2, 1e-6);
  CHECK(std::abs(y1[0] + 1) < 1e-6);
  CHECK(std::abs(y1[1] - 1) < 1e-6);

  auto x = random_tensor<double>({8}, 12, -4, 4);
  Tensor<double> g8 = Tensor<double>::full({8}, 1), b8(Shape{8});
  auto y = kernels::layer_norm(x, g8, b8, 1e-6);
  double mu = 0, var = 0;
  for (auto v : y.data()) mu += v;
  mu /= 8;
  for (auto v : y.data()) var += (v - mu) * (v - mu);
  var /= 8;
  CHECK(std::abs(mu) < 1e-6);
  CHECK(std::abs(var - 1) < 1e-4);

  auto xb = random_tensor<float>({5, 6, 12}, 13);
  auto gb = random_tensor<float>({12}, 14), bb = random_tensor<float>({12}, 15);
  CHECK(max_abs_diff(kernels::layer_norm(xb, gb, bb, 1e-6f), kernels::serial::layer_norm(xb, gb, bb, 1e-6f)) < 1e-5f);
}

TEST_CASE("gelu") {
  Tensor<double> x(Shape{4}, {0, 1, 30, -30});
  auto y = kernels::gelu(x);
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 0.5 * (1 + std::erf(1 / std::sqrt(2.0)))) < 1e-15);
  CHECK(std::abs(y[1] - 0.8413447460685429) < 1e-12);
  CHECK(std::abs(y[2] - 30) < 1e-9);
  CHECK(std::abs(y[3]) < 1e-9);
}

TEST_CASE("conv2d") {
  CHECK(kernels::conv_out_extent(32, 7, 4, 3) == 8);
  CHECK_THROWS_AS(kernels::conv_out_extent(2, 7, 1, 0), ShapeError);

  auto x = random_tensor<float>({1, 5, 5, 2}, 16);
  Tensor<float> id(Shape{1, 1, 2, 2}, {1, 0, 0, 1});
  CHECK(max_abs_diff(kernels::conv2d<float>(x, id, nullptr, {}), x) == 0.0f);

  auto w = random_tensor<float>({3, 3, 2, 3}, 17);
  auto b = random_tensor<float>({3}, 18);
  auto y = kernels::conv2d(x, w, &b, {1, 1, false});
  REQUIRE(y.shape() == Shape{1, 5, 5, 3});
  for (int oy = 0; oy < 5; ++oy)
    for (int ox = 0; ox < 5; ++ox)
      for (int co = 0; co < 3; ++co) {
        double s = b[co];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx)
            for (int ci = 0; ci < 2; ++ci) {
              int iy = oy - 1 + ky, ix = ox - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              s += double(x[(iy * 5 + ix) * 2 + ci]) * w[((ky * 3 + kx) * 2 + ci) * 3 + co];
            }
        CHECK(std::abs(y[(oy * 5 + ox) * 3 + co] - s) < 1e-5);
      }
}

TEST_CASE("conv2d agrees with serial reference on assorted shapes") {
  unsigned seed = 100;
  for (int bn : {1, 2})
    for (int hw : {3, 5, 8})
      for (int cin : {1, 3})
        for (int k : {1, 3})
          for (int stride : {1, 2}) {
            auto x = random_tensor<float>({bn, hw, hw, cin}, seed++);
            auto w = random_tensor<float>({k, k, cin, 2}, seed++);
            auto b = random_tensor<float>({2}, seed++);
            kernels::ConvSpec spec{stride, k / 2, false};
            CHECK(max_abs_diff(kernels::conv2d(x, w, &b, spec), kernels::serial::conv2d(x, w, &b, spec)) < 1e-5f);
            auto wd = random_tensor<float>({k, k, 1, cin}, seed++);
            kernels::ConvSpec dspec{stride, k / 2, true};
            CHECK(max_abs_diff(kernels::conv2d<float>(x, wd, nullptr, dspec), kernels::serial::conv2d<float>(x, wd, nullptr, dspec)) <
                  1e-5f);
          }
}

TEST_CASE("unfold window contents") {
  PatchGeometry g;
  auto ones = Tensor<float>::full({1, 4, 4, 1}, 1);
  auto p = kernels::unfold(ones, g);
  REQUIRE(p.shape() == Shape{1, 4, 16, 1});
  // Patch (0,0) spans rows and columns -1..2: a 3x3 block of real pixels.
  int count = 0;
  for (int s = 0; s < 16; ++s) count += p[s] == 1.0f;
  CHECK(count == 9);

  auto small = kernels::unfold(Tensor<float>::full({1, 2, 2, 1}, 1), g);
  REQUIRE(small.shape() == Shape{1, 1, 16, 1});
  int nz = 0;
  for (auto v : small.data()) nz += v != 0;
  CHECK(nz == 4);

  auto z = kernels::unfold(Tensor<float>(Shape{1, 6, 8, 3}), g);
  for (auto v : z.data()) CHECK(v == 0.0f);

  CHECK_THROWS_AS(kernels::unfold(Tensor<float>(Shape{1, 5, 4, 1}), g), GeometryError);
}

TEST_CASE("fold coverage and adjointness") {
  PatchGeometry g;
  auto cover = kernels::fold(kernels::unfold(Tensor<float>::full({1, 4, 4, 1}, 1), g), 4, 4, g);
  const float expect[16] = {1, 2, 2, 1, 2, 4, 4, 2, 2, 4, 4, 2, 1, 2, 2, 1};
  for (int i = 0; i < 16; ++i) CHECK(cover[i] == expect[i]);

  auto zero = kernels::fold(Tensor<float>(Shape{1, 4, 16, 2}), 4, 4, g);
  for (auto v : zero.data()) CHECK(v == 0.0f);

  unsigned seed = 200;
  for (auto [h, w] : {std::pair{4, 4}, {6, 8}, {2, 2}, {8, 12}}) {
    auto x = random_tensor<float>({2, h, w, 3}, seed++);
    auto ux = kernels::unfold(x, g);
    auto y = random_tensor<float>(ux.shape(), seed++);
    auto fy = kernels::fold(y, h, w, g);
    CHECK(std::abs(dot(ux, y) - dot(x, fy)) < 1e-5);
    CHECK(max_abs_diff(ux, kernels::serial::unfold(x, g)) == 0.0f);
    CHECK(max_abs_diff(fy, kernels::serial::fold(y, h, w, g)) < 1e-6f);
    // fold o unfold multiplies by coverage in {1,2,4}
    auto fu = kernels::fold(ux, h, w, g);
    auto cov = kernels::fold(kernels::unfold(Tensor<float>::full(x.shape(), 1), g), h, w, g);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      CHECK((cov[i] == 1 || cov[i] == 2 || cov[i] == 4));
      CHECK(std::abs(fu[i] - cov[i] * x[i]) < 1e-6);
    }
  }
  CHECK_THROWS_AS(kernels::fold(Tensor<float>(Shape{1, 3, 16, 1}), 4, 4, g), GeometryError);
}

TEST_CASE("patch geometry") {
  PatchGeometry g;
  CHECK(g.slots() == 16);
  CHECK(g.out_extent(8) == 4);
  CHECK_THROWS_AS(g.out_extent(7), GeometryError);
  CHECK(PatchGeometry::for_patch(4) == PatchGeometry{4, 2, 1});
  CHECK(PatchGeometry::for_patch(6) == PatchGeometry{6, 2, 2});
  CHECK(PatchGeometry::for_patch(2) == PatchGeometry{2, 2, 0});
}

TEST_CASE("bilinear resize") {
  auto x = random_tensor<float>({1, 3, 5, 2}, 20);
  CHECK(max_abs_diff(kernels::bilinear_resize(x, 3, 5), x) == 0.0f);
  auto c = kernels::bilinear_resize(Tensor<float>::full({1, 3, 3, 1}, 0.7f), 7, 5);
  for (auto v : c.data()) CHECK(std::abs(v - 0.7f) < 1e-6);

  Tensor<double> src(Shape{1, 2, 2, 1}, {0, 1, 2, 3});
  auto y = kernels::bilinear_resize(src, 4, 4);
  // align_corners=false: source coordinate (i + 0.5) / 2 - 0.5, clamped to [0, 1].
  auto coord = [](int i) { return std::clamp((i + 0.5) / 2.0 - 0.5, 0.0, 1.0); };
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(std::abs(y[i * 4 + j] - (2 * coord(i) + coord(j))) < 1e-12);
  CHECK(y[1 * 4 + 2] == doctest::Approx(1.25));
  CHECK(y[0] == 0.0);
  CHECK(y[15] == 3.0);
}

TEST_CASE("bilinear backward is the adjoint") {
  auto x = random_tensor<double>({2, 3, 5, 2}, 21);
  auto y = kernels::bilinear_resize(x, 8, 4);
  auto gy = random_tensor<double>(y.shape(), 22);
  auto gx = kernels::bilinear_resize_backward(gy, 3, 5);
  CHECK(std::abs(dot(y, gy) - dot(x, gx)) < 1e-10);
}

TEST_CASE("permute") {
  auto x = random_tensor<float>({2, 3, 4}, 23);
  auto y = kernels::permute(x, {2, 0, 1});
  REQUIRE(y.shape() == Shape{4, 2, 3});
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 4; ++c) CHECK(y[(c * 2 + a) * 3 + b] == x[(a * 3 + b) * 4 + c]);
}

TEST_CASE("cover softmax partitions unity over each pixel") {
  PatchGeometry g;
  for (auto [h, w] : {std::pair{4, 4}, {2, 2}, {6, 10}}) {
    const std::int64_t l = g.out_extent(h) * g.out_extent(w);
    auto logits = random_tensor<double>({2, l, 16}, 30 + h, -4, 4);
    auto m = kernels::cover_softmax(logits, h, w, g);
    auto folded = kernels::fold(m.reshaped(Shape{2, l, 16, 1}), h, w, g);
    for (auto v : folded.data()) CHECK(std::abs(v - 1) < 1e-12);
    auto valid = kernels::slot_valid_mask(h, w, g);
    for (std::int64_t i = 0; i < m.numel(); ++i)
      if (!valid[static_cast<std::size_t>(i % (l * 16))]) CHECK(m[i] == 0.0);
  }
}

TEST_CASE("MAC counter") {
  mac::Recorder rec;
  {
    mac::Tag t("mm");
    kernels::matmul(Tensor<float>(Shape{2, 3, 4}), Tensor<float>(Shape{4, 5}));
  }
  kernels::linear<float>(Tensor<float>(Shape{7, 3}), Tensor<float>(Shape{3, 2}), nullptr);
  CHECK(rec.total("mm") == 2 * 3 * 4 * 5);
  CHECK(rec.total("untagged") == 7 * 3 * 2);
}
