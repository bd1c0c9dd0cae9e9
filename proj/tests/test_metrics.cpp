#include <cmath>
#include <random>

#include "doctest.h"
#include "hila/encoder.hpp"
#include "hila/mac_counter.hpp"
#include "hila/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace hila;
using oracles::brute_f;
using oracles::brute_sq_distance;
using oracles::random_blobs;

namespace {

LabelMap grid(std::int64_t h, std::int64_t w, std::vector<int> v) {
  LabelMap m(h, w);
  m.v = std::move(v);
  return m;
}

}  // namespace

TEST_CASE("miou hand example") {
  const auto pred = grid(2, 2, {0, 1, 1, 1});
  const auto label = grid(2, 2, {0, 0, 1, 1});
  ConfusionAccumulator acc(2);
  acc.add(pred, label);
  CHECK(acc.intersection() == std::vector<std::int64_t>{1, 2});
  CHECK(acc.union_count(0) == 2);
  CHECK(acc.union_count(1) == 3);
  // Exact rational mean from the integer counts: (1/2 + 2/3) / 2 == 7/12.
  const std::int64_t num = acc.intersection()[0] * acc.union_count(1) + acc.intersection()[1] * acc.union_count(0);
  const std::int64_t den = 2 * acc.union_count(0) * acc.union_count(1);
  CHECK(num * 12 == 7 * den);
  const auto r = acc.result();
  CHECK(*r.per_class[0] == 0.5);
  CHECK(*r.per_class[1] == 2.0 / 3.0);
  CHECK(*r.miou == 7.0 / 12.0);
  CHECK(r.pixel_accuracy == 0.75);
}

TEST_CASE("miou edge cases and invariants") {
  const auto a = random_blobs(16, 16, 4, 1);
  CHECK(*miou(a, a, 4).miou == 1.0);

  const auto ignored = grid(1, 3, {255, 255, 255});
  const auto r = miou(grid(1, 3, {0, 1, 2}), ignored, 3);
  CHECK_FALSE(r.miou.has_value());
  for (const auto& c : r.per_class) CHECK_FALSE(c.has_value());

  CHECK_THROWS_AS(miou(grid(1, 2, {0, 4}), grid(1, 2, {0, 1}), 4), DataError);
  CHECK_THROWS_AS(miou(grid(1, 2, {0, 1}), grid(1, 2, {0, 7}), 4), DataError);
  CHECK_THROWS_AS(miou(grid(1, 2, {0, 1}), grid(2, 1, {0, 1}), 4), ShapeError);

  // Absent classes are excluded from the mean.
  const auto r2 = miou(grid(1, 2, {0, 0}), grid(1, 2, {0, 0}), 5);
  CHECK(*r2.miou == 1.0);
  CHECK_FALSE(r2.per_class[3].has_value());

  // Relabeling permutes per-class values and leaves the mean unchanged.
  const auto p = random_blobs(20, 24, 4, 2), l = random_blobs(20, 24, 4, 3);
  const int perm[4] = {2, 0, 3, 1};
  LabelMap pp = p, lp = l;
  for (auto& v : pp.v) v = perm[v];
  for (auto& v : lp.v) v = perm[v];
  const auto base = miou(p, l, 4), permuted = miou(pp, lp, 4);
  for (int c = 0; c < 4; ++c) CHECK(base.per_class[static_cast<std::size_t>(c)] == permuted.per_class[static_cast<std::size_t>(perm[c])]);
  CHECK(*base.miou == doctest::Approx(*permuted.miou).epsilon(1e-15));

  // Merging per-image accumulators equals one pass over everything.
  ConfusionAccumulator whole(4), part1(4), part2(4);
  const auto p2 = random_blobs(20, 24, 4, 4), l2 = random_blobs(20, 24, 4, 5);
  whole.add(p, l);
  whole.add(p2, l2);
  part1.add(p, l);
  part2.add(p2, l2);
  part1.merge(part2);
  CHECK(part1.intersection() == whole.intersection());
  CHECK(part1.pred_count() == whole.pred_count());
  CHECK(part1.label_count() == whole.label_count());
  for (int c = 0; c < 4; ++c) {
    const auto i = static_cast<std::size_t>(c);
    CHECK(whole.intersection()[i] <= std::min(whole.pred_count()[i], whole.label_count()[i]));
  }
}

TEST_CASE("exact distance transform matches brute force") {
  std::mt19937 gen(7);
  for (auto [h, w] : {std::pair{1, 1}, {1, 9}, {7, 1}, {13, 17}, {32, 20}}) {
    for (double density : {0.0, 0.01, 0.1, 0.5}) {
      std::vector<std::uint8_t> f(static_cast<std::size_t>(h * w));
      for (auto& v : f) v = (gen() % 1000) < density * 1000;
      const auto fast = squared_distance_transform(f, h, w);
      const auto slow = brute_sq_distance(f, h, w);
      for (std::size_t i = 0; i < f.size(); ++i) CHECK(fast[i] == slow[i]);
    }
  }
}

TEST_CASE("boundary extraction") {
  const auto m = grid(3, 4, {0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2});
  CHECK(boundary_map(m) == std::vector<std::uint8_t>{0, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1});
  CHECK(boundary_map(m, 1) == std::vector<std::uint8_t>{0, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0});
  CHECK(boundary_map(grid(2, 2, {3, 3, 3, 3})) == std::vector<std::uint8_t>(4, 0));
}

TEST_CASE("boundary F-score examples") {
  const auto a = random_blobs(32, 32, 3, 11);
  const auto same = boundary_fscore(a, a, 3, Threshold::pixels(3));
  for (const auto& c : same.per_class)
    if (c) CHECK(*c == 1.0);
  CHECK(*same.mean == 1.0);
  CHECK(imagewise_fscore(a, a).f == 1.0);

  LabelMap sq(32, 32, 0), shifted(32, 32, 0);
  for (int y = 8; y < 20; ++y)
    for (int x = 8; x < 20; ++x) {
      sq.at(y, x) = 1;
      shifted.at(y + 1, x) = 1;
    }
  CHECK(*boundary_fscore(shifted, sq, 2, Threshold::pixels(3)).mean == 1.0);
  CHECK(imagewise_fscore(shifted, sq, Threshold::pixels(3)).f == 1.0);

  // Disjoint class sets: every class boundary lives in only one of the maps.
  LabelMap p(16, 16, 0), l(16, 16, 2);
  for (int y = 4; y < 8; ++y)
    for (int x = 4; x < 8; ++x) {
      p.at(y, x) = 1;
      l.at(y + 6, x + 6) = 3;
    }
  CHECK(*boundary_fscore(p, l, 4, Threshold::pixels(3)).mean == 0.0);

  // Image-wise contours ignore class identity.
  LabelMap perm = a;
  for (auto& v : perm.v) v = (v + 1) % 3;
  CHECK(imagewise_fscore(perm, a, Threshold::pixels(1)).f == 1.0);
  CHECK(*boundary_fscore(perm, a, 3, Threshold::pixels(1)).mean < 1.0);
}

TEST_CASE("F-score agrees with the pairwise oracle") {
  LabelMap vsplit(64, 64, 0), hsplit(64, 64, 0);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      vsplit.at(y, x) = x >= 32;
      hsplit.at(y, x) = y >= 32;
    }
  const double f = imagewise_fscore(vsplit, hsplit, Threshold::pixels(3)).f;
  CHECK(std::abs(f - brute_f(boundary_map(vsplit), boundary_map(hsplit), 64, 3)) < 1e-9);
  CHECK(f > 0);
  CHECK(f < 0.2);

  for (unsigned seed = 0; seed < 12; ++seed) {
    const auto p = random_blobs(24, 20, 3, 100 + seed), l = random_blobs(24, 20, 3, 200 + seed);
    for (double r : {0.0, 1.0, 1.5, 2.5, 3.0}) {
      const auto t = Threshold::pixels(r);
      CHECK(std::abs(imagewise_fscore(p, l, t).f - brute_f(boundary_map(p), boundary_map(l), 20, r)) < 1e-9);
      const auto per = boundary_fscore(p, l, 3, t);
      for (int c = 0; c < 3; ++c) {
        const auto pb = boundary_map(p, c), lb = boundary_map(l, c);
        if (per.per_class[static_cast<std::size_t>(c)]) {
          CHECK(std::abs(*per.per_class[static_cast<std::size_t>(c)] - brute_f(pb, lb, 20, r)) < 1e-9);
        }
      }
      // Swapping prediction and label swaps P and R and keeps F.
      CHECK(imagewise_fscore(l, p, t).f == doctest::Approx(imagewise_fscore(p, l, t).f).epsilon(1e-15));
    }
  }
}

TEST_CASE("thresholds") {
  CHECK(Threshold::relative().resolve(1024, 2048) == 3.0);
  CHECK(Threshold::relative().resolve(64, 64) == 1.0);
  CHECK(Threshold::pixels(3).resolve(64, 64) == 3.0);
  CHECK(Threshold::relative().describe() == "relative");
}

TEST_CASE("center crop evaluation") {
  const auto p = random_blobs(12, 10, 3, 31), l = random_blobs(12, 10, 3, 32);
  auto m = [](const LabelMap& a, const LabelMap& b) { return *miou(a, b, 3).miou; };
  CHECK(crop_eval(p, l, 12, 10, m) == m(p, l));

  const auto a = grid(4, 4, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  const auto c = center_crop(a, 2, 2);
  CHECK(c.v == std::vector<int>{5, 6, 9, 10});

  const auto pp = grid(4, 4, {2, 2, 2, 2, 2, 0, 1, 2, 2, 1, 1, 2, 2, 2, 2, 2});
  const auto ll = grid(4, 4, {2, 2, 2, 2, 2, 0, 0, 2, 2, 1, 1, 2, 2, 2, 2, 2});
  const auto full = miou(pp, ll, 3);
  CHECK(full.per_class[2].has_value());
  const double cropped = crop_eval(pp, ll, 2, 2, m);
  CHECK(cropped == *miou(grid(2, 2, {0, 1, 1, 1}), grid(2, 2, {0, 0, 1, 1}), 3).miou);
  CHECK(cropped == 7.0 / 12.0);  // class 2 lies outside the crop and drops out of the mean
  CHECK_THROWS_AS(crop_eval(pp, ll, 5, 2, m), ShapeError);
}

TEST_CASE("closed-form FLOPs") {
  CHECK(flops_interlevel(512, 320, 32, 32, 64, 64).dot == 10485760ull);
  for (std::uint64_t d : {1ull, 7ull, 64ull}) CHECK(flops_interlevel(2 * d, d, 1, 1, 2, 2).dot == 32 * d);
  CHECK(flops_interlevel(64, 32, 4, 5, 8, 10).fc == 2ull * 20 * 64 * 32 + 2ull * 80 * 32 * 32);
  for (std::uint64_t d : {1ull, 3ull, 32ull}) CHECK(flops_selfattention(1, 1, d).total() == 4 * d * d + 2 * d);
  CHECK(flops_selfattention(2, 2, 1).total() == 48);

  // Global attention spends d H^2 W^2 where the local window spends 16 d H W.
  for (auto [h, w, d] : {std::tuple{8ull, 8ull, 32ull}, {16ull, 32ull, 64ull}, {64ull, 128ull, 320ull}}) {
    const auto sa = flops_selfattention(h, w, d);
    const auto il = flops_interlevel(2 * d, d, h, w, 2 * h, 2 * w);
    CHECK(sa.dot / 2 == d * h * h * w * w);
    CHECK(il.dot / 2 == 16 * d * h * w);
    CHECK(sa.dot * 16 == il.dot * h * w);
  }
}

TEST_CASE("closed forms equal the MAC counter on a forward pass") {
  for (std::int64_t side : {32, 64}) {
    ModelConfig cfg = tiny_config();
    cfg.stages[3].N = 3;
    cfg.stages[3].s_stride = 1;
    const Model<float> m(cfg, 3);
    mac::Recorder rec;
    (void)m.forward_encoder(Var<float>(testutil::rnd<float>({2, side, side, 3}, 1)));
    const auto report = config_flops(cfg, side, side, 2);
    std::uint64_t bu_fc = 0, bu_dot = 0, td_fc = 0, td_dot = 0;
    for (const auto& c : report.components) {
      const bool bu = c.name.find("bottom_up") != std::string::npos;
      (bu ? bu_fc : td_fc) += c.fc;
      (bu ? bu_dot : td_dot) += c.dot;
    }
    CHECK(rec.total("bottom_up.fc") == bu_fc);
    CHECK(rec.total("bottom_up.dot") == bu_dot);
    CHECK(rec.total("top_down.fc") == td_fc);
    CHECK(rec.total("top_down.dot") == td_dot);
    CHECK(report.fc_total == bu_fc + td_fc);
    CHECK(report.total() == report.fc_total + report.dot_total);
  }
}

TEST_CASE("evaluation summary") {
  std::vector<LabelMap> preds{random_blobs(16, 16, 3, 41), random_blobs(16, 16, 3, 42)};
  std::vector<LabelMap> labels{preds[0], random_blobs(16, 16, 3, 43)};
  const auto s = evaluate(preds, labels, 3, Threshold::pixels(3));
  CHECK(s.threshold_px == 3.0);
  const auto j = s.to_json();
  CHECK(j.contains("miou"));
  CHECK(j["per_class_iou"].size() == 3);
  CHECK(j["fscore_threshold"]["mode"] == "absolute");
  CHECK(s.imagewise_f == doctest::Approx((1.0 + imagewise_fscore(preds[1], labels[1], Threshold::pixels(3)).f) / 2));
}
