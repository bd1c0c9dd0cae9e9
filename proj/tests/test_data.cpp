#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "hila/data.hpp"
#include "hila/train.hpp"

using namespace hila;

namespace {

std::string scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("hila_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p.string();
}

bool bytes_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("ppm bytes and round trip") {
  Image one(1, 1);
  std::fill(one.rgb.begin(), one.rgb.end(), 255);
  CHECK(encode_ppm(one) == std::string("P6\n1 1\n255\n\xff\xff\xff"));
  CHECK(decode_ppm(std::string("P6\n1 1\n255\n\xff\xff\xff")) == one);
  // Comments and arbitrary whitespace in the header are allowed.
  CHECK(decode_ppm(std::string("P6 # c\n1\t1\n255 \xff\xff\xff")) == one);

  std::mt19937 gen(4);
  Image img(7, 13);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(gen() & 255);
  CHECK(decode_ppm(encode_ppm(img)) == img);
  CHECK(tensor_to_image(image_to_tensor(img)) == img);

  const std::string dir = scratch_dir("ppm");
  std::filesystem::create_directories(dir);
  write_ppm(dir + "/a.ppm", img);
  CHECK(read_ppm(dir + "/a.ppm") == img);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ppm parse errors name the byte offset") {
  const auto msg = [](const std::string& bytes) {
    try {
      decode_ppm(bytes);
    } catch (const ParseError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(msg(std::string("P6\n2 1\n255\n\xff\xff\xff")).find("at byte 14") != std::string::npos);
  CHECK(msg("P3\n1 1\n255\n").find("at byte 0") != std::string::npos);
  CHECK(msg("P6\n1 1\n65535\n").find("at byte") != std::string::npos);
  CHECK(msg("P6\nx 1\n255\n").find("at byte 3") != std::string::npos);
  CHECK(msg("").find("at byte 0") != std::string::npos);
  CHECK_THROWS_AS(decode_pgm(std::string("P5\n2 2\n255\n\x01")), ParseError);
  CHECK_THROWS_AS(read_ppm("/nonexistent/dir/x.ppm"), DataError);
}

TEST_CASE("label maps round trip through pgm") {
  LabelMap m(3, 4);
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<int>(i % 4);
  m.at(1, 2) = 255;
  const LabelMap back = decode_pgm(encode_pgm(m));
  CHECK(back == m);
  CHECK(back.at(1, 2) == 255);
  CHECK(encode_pgm(m).substr(0, 11) == "P5\n4 3\n255\n");

  m.at(0, 0) = 256;
  CHECK_THROWS_AS(encode_pgm(m), DataError);
  m.at(0, 0) = -1;
  CHECK_THROWS_AS(encode_pgm(m), DataError);
}

TEST_CASE("shape generation is deterministic and index-addressable") {
  ShapesSpec s;
  s.seed = 11;
  const auto a = generate_shapes(s, 6), b = generate_shapes(s, 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(bytes_equal(a[i].image, b[i].image));
    CHECK(a[i].labels == b[i].labels);
  }
  const auto tail = generate_shapes(s, 2, 4);
  CHECK(bytes_equal(tail[0].image, a[4].image));
  CHECK(tail[1].labels == a[5].labels);

  s.seed = 12;
  CHECK_FALSE(bytes_equal(generate_sample(s, 0).image, a[0].image));
}

TEST_CASE("noise-free single rectangle: label edges are color edges") {
  ShapesSpec s;
  s.num_classes = 2;
  s.min_shapes = s.max_shapes = 1;
  s.noise_std = 0;
  for (std::int64_t idx = 0; idx < 5; ++idx) {
    s.seed = static_cast<std::uint64_t>(idx);
    const SegSample smp = generate_sample(s, idx);
    const Image img = tensor_to_image(smp.image);
    const auto n = smp.labels.h;
    std::int64_t fg = 0;
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x) {
        fg += smp.labels.at(y, x) == 1;
        if (x + 1 < n) {
          const bool label_edge = smp.labels.at(y, x) != smp.labels.at(y, x + 1);
          CHECK(label_edge == !std::equal(img.px(y, x), img.px(y, x) + 3, img.px(y, x + 1)));
        }
        if (y + 1 < n) {
          const bool label_edge = smp.labels.at(y, x) != smp.labels.at(y + 1, x);
          CHECK(label_edge == !std::equal(img.px(y, x), img.px(y, x) + 3, img.px(y + 1, x)));
        }
      }
    // One axis-aligned rectangle: foreground is its bounding box.
    std::int64_t y0 = n, y1 = -1, x0 = n, x1 = -1;
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x)
        if (smp.labels.at(y, x) == 1) y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
    CHECK(fg == (y1 - y0 + 1) * (x1 - x0 + 1));
    CHECK(y1 - y0 + 1 >= s.min_size);
    CHECK(x1 - x0 + 1 <= s.max_size);
  }
}

TEST_CASE("class coverage, value ranges and bar width") {
  ShapesSpec s;
  s.seed = 3;
  const auto data = generate_shapes(s, 100);
  std::vector<std::int64_t> hist(static_cast<std::size_t>(s.num_classes), 0);
  std::int64_t bars_seen = 0;
  for (const auto& smp : data) {
    CHECK(smp.image.shape() == Shape{64, 64, 3});
    for (float v : smp.image.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    for (int c : smp.labels.v) {
      REQUIRE(c >= 0);
      REQUIRE(c < s.num_classes);
      ++hist[static_cast<std::size_t>(c)];
    }
    // Horizontal bars show up as runs of exactly the bar width down a column.
    for (std::int64_t x = 0; x < 64; ++x) {
      std::int64_t run = 0;
      for (std::int64_t y = 0; y <= 64; ++y) {
        if (y < 64 && smp.labels.at(y, x) == 3) {
          ++run;
        } else {
          bars_seen += run == kBarWidth;
          run = 0;
        }
      }
    }
  }
  for (std::int64_t h : hist) CHECK(h > 0);
  CHECK(bars_seen > 0);
  CHECK(kind_of_class(1) == ShapeKind::rectangle);
  CHECK(kind_of_class(2) == ShapeKind::disc);
  CHECK(kind_of_class(3) == ShapeKind::bar);
  CHECK(kind_of_class(4) == ShapeKind::rectangle);
}

TEST_CASE("spec validation and json") {
  ShapesSpec s;
  CHECK_NOTHROW(s.validate());
  CHECK(shapes_spec_from_json(to_json(s)) == s);
  auto bad = s;
  bad.image_size = 48;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.num_classes = 1;
  CHECK_THROWS_AS(generate_shapes(bad, 1), ConfigError);
  CHECK_THROWS_AS(generate_shapes(s, 0), ConfigError);
  bad = s;
  bad.max_shapes = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.noise_std = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  auto j = to_json(s);
  j["colour"] = 1;
  CHECK_THROWS_AS(shapes_spec_from_json(j), ConfigError);
  j = to_json(s);
  j.erase("seed");
  CHECK_THROWS_AS(shapes_spec_from_json(j), ConfigError);
}

TEST_CASE("dataset directory round trip") {
  ShapesSpec s;
  s.image_size = 32;
  s.max_size = 20;
  s.seed = 8;
  const auto data = generate_shapes(s, 3);
  const std::string dir = scratch_dir("ds");
  save_dataset(dir, s, data);
  CHECK(std::filesystem::exists(dir + "/img_00002.ppm"));
  CHECK(std::filesystem::exists(dir + "/lab_00000.pgm"));
  const Dataset ds = load_dataset(dir);
  CHECK(ds.spec == s);
  REQUIRE(ds.samples.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(bytes_equal(ds.samples[i].image, data[i].image));
    CHECK(ds.samples[i].labels == data[i].labels);
  }

  write_file(dir + "/manifest.json", "{\"format_version\": 99}");
  CHECK_THROWS_AS(load_dataset(dir), DataError);
  write_file(dir + "/manifest.json", "{not json");
  CHECK_THROWS_AS(load_dataset(dir), ParseError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("batches: flips and padded crops keep labels aligned") {
  ShapesSpec s;
  s.image_size = 32;
  s.max_size = 20;
  const auto data = generate_shapes(s, 4);
  const std::size_t idx[] = {2, 0};
  const Batch plain = make_batch(data, idx);
  CHECK(plain.images.shape() == Shape{2, 32, 32, 3});
  CHECK(std::equal(data[2].labels.v.begin(), data[2].labels.v.end(), plain.labels.begin()));

  Rng aug(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Batch b = make_batch(data, idx, &aug, 6);
    for (std::int64_t i = 0; i < 2; ++i) {
      const auto& src = data[idx[i]];
      // Each kept pixel's (color, label) pair exists in the source at the same pair.
      for (std::int64_t y = 0; y < 32; ++y)
        for (std::int64_t x = 0; x < 32; ++x) {
          const int lab = b.labels[static_cast<std::size_t>((i * 32 + y) * 32 + x)];
          const float* px = &b.images[((i * 32 + y) * 32 + x) * 3];
          if (lab == 255) {
            CHECK((px[0] == 0 && px[1] == 0 && px[2] == 0));
            continue;
          }
          bool found = false;
          for (std::int64_t sy = std::max<std::int64_t>(0, y - 6); sy <= std::min<std::int64_t>(31, y + 6) && !found; ++sy)
            for (std::int64_t sx = 0; sx < 32 && !found; ++sx)
              found = src.labels.at(sy, sx) == lab && src.image[(sy * 32 + sx) * 3] == px[0] &&
                      src.image[(sy * 32 + sx) * 3 + 1] == px[1] && src.image[(sy * 32 + sx) * 3 + 2] == px[2];
          CHECK(found);
        }
    }
  }
}
