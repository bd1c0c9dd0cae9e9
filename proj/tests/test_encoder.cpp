#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "hila/checkpoint.hpp"
#include "hila/encoder.hpp"
#include "hila/gradcheck.hpp"
#include "hila/image.hpp"
#include "hila/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace hila;

namespace {

ModelConfig plain_config() {
  ModelConfig cfg = tiny_config();
  for (auto& s : cfg.stages) s.hila = false;
  return cfg;
}

Tensor<float> image(std::int64_t b, std::int64_t h, std::int64_t w, unsigned seed) {
  return testutil::rnd<float>({b, h, w, 3}, seed);
}

std::int64_t attn_params(std::int64_t dq, std::int64_t dc, std::int64_t p) {
  const std::int64_t d = std::min(dq, dc);
  return 2 * dq + 2 * dc + (dq * d + d) + 2 * (dc * d + d) + (d * dq + dq) + p * p;
}
std::int64_t ffn_params(std::int64_t d, std::int64_t e) {
  return 2 * d + (d * e * d + e * d) + (9 * e * d + e * d) + (e * d * d + d);
}
std::int64_t sra_params(std::int64_t d, std::int64_t r, std::int64_t e) {
  std::int64_t n = 2 * d + 4 * (d * d + d);
  if (r > 1) n += r * r * d * d + d + 2 * d;
  return n + ffn_params(d, e);
}

}  // namespace

TEST_CASE("config JSON round trip and rejection") {
  const ModelConfig cfg = tiny_config();
  CHECK(parse_config(to_json(cfg).dump()) == cfg);

  auto j = to_json(cfg);
  j["stages"][1]["gamma"] = 1;
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
  j = to_json(cfg);
  j["extra"] = 0;
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
  j = to_json(cfg);
  j["stages"][2].erase("R");
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
  j = to_json(cfg);
  j["stages"].erase(3);
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
  CHECK_THROWS_AS(parse_config("{\"num_classes\": 4,"), ParseError);

  ModelConfig bad = cfg;
  bad.stages[2].p_patch = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.stages[0].hila = true;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.stages[3].H = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.stages[1].S = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("patch merge shapes and constant input") {
  ParamStore<float> ps(3);
  PatchMergeParams<float> p{make_conv(ps, "c", 7, 3, 8, {4, 3, false}), make_norm(ps, "n", 8)};
  CHECK(patch_merge(Var<float>(image(1, 32, 32, 1)), p).shape() == Shape{1, 8, 8, 8});

  PatchMergeParams<float> q{make_conv(ps, "c3", 3, 4, 6, {2, 1, false}), make_norm(ps, "n3", 6)};
  CHECK(patch_merge(Var<float>(testutil::rnd<float>({2, 8, 8, 4}, 2)), q).shape() == Shape{2, 4, 4, 6});
  // A 2x2 map is still valid for K=3 with padding 1 (the last stage of a 32x32 input) ...
  CHECK(patch_merge(Var<float>(testutil::rnd<float>({1, 2, 2, 4}, 2)), q).shape() == Shape{1, 1, 1, 6});
  // ... but not without padding.
  PatchMergeParams<float> unpadded{make_conv(ps, "c0", 3, 4, 6, {2, 0, false}), make_norm(ps, "n0", 6)};
  CHECK_THROWS_AS(patch_merge(Var<float>(testutil::rnd<float>({1, 2, 2, 4}, 2)), unpadded), ShapeError);

  // Every output channel sees the same weights, so each pixel is constant across channels.
  for (auto& w : q.conv.w.mutable_value().data()) w = 0.25f;
  const auto y = patch_merge(Var<float>(Tensor<float>::full({1, 8, 8, 4}, 1.5f)), q).value();
  for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("sra block: identity, shapes, reduced attention") {
  for (int r : {1, 2, 3}) {
    ModelConfig cfg = plain_config();
    cfg.stages[1].R = r;
    Model<double> m(cfg, 9);
    testutil::randomize(m.params(), 4, 0.3);
    const auto& blk = m.stages()[1].blocks[0];
    for (auto [h, w] : {std::pair{4, 4}, {5, 7}, {1, 3}}) {
      const auto x = testutil::rnd<double>({2, h, w, 32}, 11);
      Tensor<double> attn;
      const auto y = sra_block(Var<double>(x), blk, &attn);
      CHECK(y.shape() == x.shape());
      const std::int64_t m_len = ((h + r - 1) / r) * ((w + r - 1) / r);
      CHECK(attn.shape() == Shape{2, 1, h * w, m_len});
      for (std::int64_t row = 0; row < attn.numel() / m_len; ++row) {
        double s = 0;
        for (std::int64_t j = 0; j < m_len; ++j) s += attn[row * m_len + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }

  ModelConfig cfg = plain_config();
  cfg.stages[1].R = 1;
  Model<double> m(cfg, 2);
  testutil::randomize(m.params(), 8, 0.3);
  const auto& blk = m.stages()[1].blocks[1];
  for (auto* t : {&blk.v.w, &blk.v.b, &blk.proj.w, &blk.proj.b, &blk.ffn.fc2.w, &blk.ffn.fc2.b}) {
    auto tv = *t;
    for (auto& e : tv.mutable_value().data()) e = 0;
  }
  const auto x = testutil::rnd<double>({1, 3, 5, 32}, 1);
  const auto y = sra_block(Var<double>(x), blk).value();
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);

  ModelConfig odd = plain_config();
  Model<double> mo(odd, 1);
  auto heads_bad = mo.stages()[3].blocks[0];
  heads_bad.heads = 3;
  CHECK_THROWS_AS(sra_block(Var<double>(testutil::rnd<double>({1, 2, 2, 128}, 1)), heads_bad), ConfigError);
}

TEST_CASE("encoder ladder shapes and divisibility") {
  const ModelConfig cfg = tiny_config();
  Model<float> m(cfg, 1);
  const auto out = m.forward_encoder(Var<float>(image(1, 32, 32, 3)));
  const std::int64_t side[4] = {8, 4, 2, 1};
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(out.features[l].data.shape() == Shape{1, side[l], side[l], cfg.stages[l].d});
    CHECK(out.features[l].stage == int(l) + 1);
  }
  CHECK(m.forward(Var<float>(image(1, 32, 32, 3))).shape() == Shape{1, 8, 8, cfg.num_classes});
  CHECK(m.forward(Var<float>(image(2, 64, 96, 4))).shape() == Shape{2, 16, 24, cfg.num_classes});
  CHECK_THROWS_AS(m.forward(Var<float>(image(1, 48, 32, 3))), ShapeError);
  CHECK_THROWS_AS(m.forward(Var<float>(testutil::rnd<float>({1, 32, 32, 1}, 1))), ShapeError);
}

TEST_CASE("HILA disabled matches an independent plain backbone bitwise") {
  const ModelConfig cfg = plain_config();
  for (std::uint64_t seed : {1ull, 77ull}) {
    Model<float> m(cfg, seed);
    oracles::PlainBackbone ref{seed};
    for (auto [b, h, w] : {std::tuple{1, 32, 32}, {2, 64, 64}, {1, 96, 64}}) {
      const auto img = image(b, h, w, static_cast<unsigned>(seed + h));
      const auto out = m.forward_encoder(Var<float>(img));
      const auto expect = ref.forward(img, cfg);
      for (std::size_t l = 0; l < 4; ++l) {
        const auto& got = out.features[l].data.value();
        REQUIRE(got.shape() == expect[l].shape());
        std::int64_t diff = 0;
        for (std::int64_t i = 0; i < got.numel(); ++i) diff += got[i] != expect[l][i];
        CHECK(diff == 0);
      }
    }
  }
}

TEST_CASE("schedule: wrapped blocks and top-down placement") {
  ModelConfig cfg = tiny_config();
  cfg.stages[2].N = 6;
  cfg.stages[2].s_stride = 3;
  Model<float> m(cfg, 1);
  const auto out = m.forward_encoder(Var<float>(image(1, 32, 32, 2)));
  CHECK(out.traces[2].wrapped_blocks == std::vector<int>{3, 6});
  CHECK(out.traces[2].td_blocks == std::vector<int>{6});
  CHECK(out.traces[1].wrapped_blocks == std::vector<int>{1, 2});
  CHECK(out.traces[1].td_blocks == std::vector<int>{2});
  CHECK(out.traces[0].wrapped_blocks.empty());

  for (int n = 1; n <= 6; ++n) {
    for (int s = 1; s <= 4; ++s) {
      ModelConfig c = tiny_config();
      c.stages[3].N = n;
      c.stages[3].s_stride = s;
      Model<float> mm(c, 2);
      const auto o = mm.forward_encoder(Var<float>(image(1, 32, 32, 5)));
      std::vector<int> expect;
      for (int i = s; i <= n; i += s) expect.push_back(i);
      CHECK(o.traces[3].wrapped_blocks == expect);
      std::vector<int> td(expect.empty() ? expect.begin() : expect.begin() + 1, expect.end());
      CHECK(o.traces[3].td_blocks == td);
      CHECK(o.features[2].iteration == c.stages[2].N + int(td.size()));
      CHECK(o.features[3].iteration == n);
    }
  }
}

TEST_CASE("iteration bookkeeping on the tiny config") {
  const ModelConfig cfg = tiny_config();
  Model<float> m(cfg, 1);
  const auto out = m.forward_encoder(Var<float>(image(1, 32, 32, 1)));
  for (std::size_t l = 0; l < 3; ++l) CHECK(out.features[l].iteration == cfg.stages[l].N + cfg.stages[l + 1].N - 1);
  CHECK(out.features[3].iteration == cfg.stages[3].N);
}

TEST_CASE("parameter-count audit") {
  for (int n : {2, 6}) {
    ModelConfig off = plain_config();
    for (auto& s : off.stages) s.N = n;
    const auto base = Model<float>(off, 1).params().count();
    for (int l = 1; l < 4; ++l) {
      ModelConfig on = off;
      auto& hi = on.stages[static_cast<std::size_t>(l)];
      const auto& lo = on.stages[static_cast<std::size_t>(l - 1)];
      hi.hila = true;
      hi.s_stride = n == 6 ? 3 : 1;
      const std::int64_t p = hi.p_patch;
      const std::int64_t expect = attn_params(hi.d, lo.d, p) + attn_params(lo.d, hi.d, p) + ffn_params(hi.d, hi.E) +
                                  ffn_params(lo.d, hi.E) + sra_params(lo.d, lo.R, lo.E);
      CHECK(Model<float>(on, 1).params().count() - base == expect);
    }
  }
  // Weight sharing: the HILA overhead does not grow with N.
  ModelConfig a = tiny_config(), b = tiny_config();
  for (auto& s : b.stages) s.N = 5;
  ModelConfig a0 = plain_config(), b0 = plain_config();
  for (auto& s : b0.stages) s.N = 5;
  CHECK(Model<float>(a, 1).params().count() - Model<float>(a0, 1).params().count() ==
        Model<float>(b, 1).params().count() - Model<float>(b0, 1).params().count());
}

TEST_CASE("decode head: zero classifier gives constant bias logits") {
  Model<float> m(tiny_config(), 4);
  auto w = m.head().cls.w;
  auto b = m.head().cls.b;
  for (auto& e : w.mutable_value().data()) e = 0;
  const float bias[4] = {0.5f, -1.0f, 2.0f, 0.25f};
  for (int c = 0; c < 4; ++c) b.mutable_value()[c] = bias[c];
  const auto y = m.forward(Var<float>(image(2, 32, 64, 1))).value();
  CHECK(y.shape() == Shape{2, 8, 16, 4});
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == bias[i % 4]);
}

TEST_CASE("gradients reach every stage") {
  // 64x64 so the last stage has more than one key and its query projection matters.
  Model<float> m(tiny_config(), 6);
  std::vector<std::uint8_t> labels(64 * 64);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(i / 1024);
  const auto loss = segmentation_loss(m.forward(Var<float>(image(1, 64, 64, 2))), labels, 64, 64);
  const auto g = backward(loss);
  for (int l = 1; l <= 4; ++l) {
    const std::string sn = "s" + std::to_string(l);
    for (const std::string& name : {sn + ".merge.conv.w", sn + ".block1.q.w", "head.proj" + std::to_string(l) + ".w"}) {
      const Tensor<float> gt = g.at(m.params().get(name));
      double mx = 0;
      for (float v : gt.data()) mx = std::max(mx, double(std::abs(v)));
      INFO(name);
      CHECK(mx > 0);
    }
  }
}

TEST_CASE("precision conversion keeps parameters") {
  Model<float> mf(tiny_config(), 12);
  const auto md = Model<double>::from(mf);
  REQUIRE(md.params().names() == mf.params().names());
  for (std::size_t i = 0; i < mf.params().vars().size(); ++i) {
    const auto& a = mf.params().vars()[i].value();
    const auto& b = md.params().vars()[i].value();
    for (std::int64_t j = 0; j < a.numel(); ++j) REQUIRE(double(a[j]) == b[j]);
  }
  const auto img = image(1, 32, 32, 3);
  const auto yf = mf.forward(Var<float>(img)).value();
  const auto yd = md.forward(Var<double>(img.cast<double>())).value();
  double worst = 0;
  for (std::int64_t i = 0; i < yf.numel(); ++i) worst = std::max(worst, std::abs(double(yf[i]) - yd[i]));
  CHECK(worst < 1e-4);
}

TEST_CASE("full model finite-difference check on sampled parameters") {
  ModelConfig cfg = tiny_config();
  Model<double> base(cfg, 21);
  testutil::randomize(base.params(), 22, 0.2);
  const auto img = testutil::rnd<double>({1, 32, 32, 3}, 23);
  std::vector<std::uint8_t> labels(32 * 32);
  std::mt19937 gen(24);
  for (auto& v : labels) v = static_cast<std::uint8_t>(gen() % 4);

  const auto& names = base.params().names();
  std::vector<Tensor<double>> inputs;
  for (const auto& v : base.params().vars()) inputs.push_back(v.value());
  auto loss = [&](const std::vector<Var<double>>& leaves) {
    ParamStore<double> ps(21);
    for (std::size_t i = 0; i < leaves.size(); ++i) ps.adopt(names[i], leaves[i]);
    const Model<double> m(cfg, std::move(ps));
    return segmentation_loss(m.forward(Var<double>(img)), labels, 32, 32);
  };

  std::vector<std::pair<std::size_t, std::int64_t>> probes;
  while (probes.size() < 20) {
    const std::size_t t = gen() % inputs.size();
    probes.emplace_back(t, static_cast<std::int64_t>(gen() % static_cast<unsigned>(inputs[t].numel())));
  }
  const auto r = grad_check_sampled<double>(loss, inputs, probes, 1e-4);
  INFO("worst ", names[r.worst_input], " rel ", r.max_rel_error);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("segmentation loss and prediction") {
  Tensor<double> logits({1, 2, 2, 3});
  for (std::int64_t i = 0; i < logits.numel(); ++i) logits[i] = (i % 3 == 1) ? 5.0 : 0.0;
  const auto pred = predict_labels(logits, 8, 8);
  CHECK(pred.size() == 64);
  for (auto p : pred) CHECK(p == 1);
  std::vector<std::uint8_t> lab(64, 1);
  const double l = segmentation_loss(Var<double>(logits), lab, 8, 8).value().item();
  CHECK(l == doctest::Approx(-std::log(std::exp(5.0) / (std::exp(5.0) + 2.0))).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip") {
  const Model<float> m(tiny_config(), 21);
  const auto dir = (std::filesystem::temp_directory_path() / ("hila_ckpt_" + std::to_string(::getpid()))).string();
  save_checkpoint(dir, m, {{"note", "x"}});
  const Checkpoint ck = load_checkpoint(dir);
  CHECK(ck.config == m.config());
  CHECK(ck.meta["note"] == "x");
  REQUIRE(ck.params.names() == m.params().names());
  for (std::size_t i = 0; i < ck.params.vars().size(); ++i) {
    const auto& a = ck.params.vars()[i].value();
    const auto& b = m.params().vars()[i].value();
    CHECK(std::memcmp(a.ptr(), b.ptr(), sizeof(float) * static_cast<std::size_t>(a.numel())) == 0);
  }
  const Model<float> back = load_model(dir);
  const auto x = Var<float>(image(1, 32, 32, 4));
  CHECK(max_abs_diff(back.forward(x).value(), m.forward(x).value()) == 0.0f);

  // Offsets in the manifest index the binary file.
  auto j = nlohmann::json::parse(read_file(dir + "/checkpoint.json"));
  std::ifstream bin(dir + "/params.hilt", std::ios::binary);
  bin.seekg(j["params"][3]["offset"].get<std::int64_t>());
  CHECK(read_hilt<float>(bin).shape() == j["params"][3]["shape"].get<Shape>());

  j["params"][1]["offset"] = 1;
  write_file(dir + "/checkpoint.json", j.dump());
  CHECK_THROWS_AS(load_checkpoint(dir), DataError);
  std::string bytes = read_file(dir + "/params.hilt");
  write_file(dir + "/params.hilt", bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_checkpoint(dir), Error);
  std::filesystem::remove_all(dir);
}
