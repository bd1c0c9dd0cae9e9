#include "hila/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hila/kernels.hpp"

namespace hila {

ConfusionAccumulator::ConfusionAccumulator(int num_classes, int ignore_index)
    : num_classes_(num_classes),
      ignore_(ignore_index),
      inter_(static_cast<std::size_t>(num_classes), 0),
      pred_(static_cast<std::size_t>(num_classes), 0),
      label_(static_cast<std::size_t>(num_classes), 0) {
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
}

void ConfusionAccumulator::add(std::span<const int> pred, std::span<const int> label) {
  if (pred.size() != label.size()) {
    throw ShapeError("prediction has " + std::to_string(pred.size()) + " pixels, label has " +
                     std::to_string(label.size()));
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int l = label[i];
    if (l == ignore_) continue;
    const int p = pred[i];
    if (l < 0 || l >= num_classes_ || p < 0 || p >= num_classes_) {
      throw DataError("class id " + std::to_string(l < 0 || l >= num_classes_ ? l : p) + " at pixel " +
                      std::to_string(i) + " outside [0, " + std::to_string(num_classes_) + ")");
    }
    ++pred_[static_cast<std::size_t>(p)];
    ++label_[static_cast<std::size_t>(l)];
    ++valid_;
    if (p == l) {
      ++inter_[static_cast<std::size_t>(p)];
      ++correct_;
    }
  }
}

void ConfusionAccumulator::add(const LabelMap& pred, const LabelMap& label) {
  if (pred.h != label.h || pred.w != label.w) throw ShapeError("prediction and label sizes differ");
  add(std::span<const int>(pred.v), std::span<const int>(label.v));
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  if (other.num_classes_ != num_classes_ || other.ignore_ != ignore_) {
    throw ContractError("cannot merge accumulators with different class setups");
  }
  for (std::size_t c = 0; c < inter_.size(); ++c) {
    inter_[c] += other.inter_[c];
    pred_[c] += other.pred_[c];
    label_[c] += other.label_[c];
  }
  valid_ += other.valid_;
  correct_ += other.correct_;
}

std::int64_t ConfusionAccumulator::union_count(int c) const {
  const auto i = static_cast<std::size_t>(c);
  return pred_[i] + label_[i] - inter_[i];
}

MiouResult ConfusionAccumulator::result() const {
  MiouResult r;
  long double sum = 0;  // extended accumulation keeps small-class means correctly rounded
  int present = 0;
  for (int c = 0; c < num_classes_; ++c) {
    const std::int64_t u = union_count(c);
    if (u == 0) {
      r.per_class.emplace_back();
      continue;
    }
    const long double iou =
        static_cast<long double>(inter_[static_cast<std::size_t>(c)]) / static_cast<long double>(u);
    r.per_class.emplace_back(static_cast<double>(iou));
    sum += iou;
    ++present;
  }
  if (present > 0) r.miou = static_cast<double>(sum / present);
  r.pixel_accuracy = valid_ > 0 ? static_cast<double>(correct_) / static_cast<double>(valid_) : 0.0;
  return r;
}

MiouResult miou(const LabelMap& pred, const LabelMap& label, int num_classes, int ignore_index) {
  ConfusionAccumulator acc(num_classes, ignore_index);
  acc.add(pred, label);
  return acc.result();
}

std::vector<std::uint8_t> boundary_map(const LabelMap& m, int c) {
  std::vector<std::uint8_t> b(m.v.size(), 0);
  for (std::int64_t y = 0; y < m.h; ++y) {
    for (std::int64_t x = 0; x < m.w; ++x) {
      const int v = m.at(y, x);
      if (c >= 0 && v != c) continue;
      const bool edge = (y > 0 && m.at(y - 1, x) != v) || (y + 1 < m.h && m.at(y + 1, x) != v) ||
                        (x > 0 && m.at(y, x - 1) != v) || (x + 1 < m.w && m.at(y, x + 1) != v);
      b[static_cast<std::size_t>(y * m.w + x)] = edge;
    }
  }
  return b;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line.
void dt_1d(const double* f, double* d, std::int64_t n, std::vector<std::int64_t>& v, std::vector<double>& z) {
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n + 1), 0);
  auto meet = [&](std::int64_t q, std::int64_t p) {
    return ((f[q] + double(q * q)) - (f[p] + double(p * p))) / double(2 * (q - p));
  };
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    double s = -kInf;
    while (k >= 0 && (s = meet(q, v[static_cast<std::size_t>(k)])) <= z[static_cast<std::size_t>(k)]) --k;
    if (k < 0) s = -kInf;
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k + 1)] = kInf;
  }
  if (k < 0) {
    std::fill(d, d + n, kInf);
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j + 1)] < double(q)) ++j;
    const std::int64_t p = v[static_cast<std::size_t>(j)];
    d[q] = double((q - p) * (q - p)) + f[p];
  }
}

}  // namespace

std::vector<double> squared_distance_transform(std::span<const std::uint8_t> features, std::int64_t h, std::int64_t w) {
  if (static_cast<std::int64_t>(features.size()) != h * w) throw ShapeError("feature map size mismatch");
  std::vector<double> g(features.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = features[i] ? 0.0 : kInf;
  std::vector<std::int64_t> v;
  std::vector<double> z;
  std::vector<double> col(static_cast<std::size_t>(h)), out(static_cast<std::size_t>(std::max(h, w)));
  for (std::int64_t x = 0; x < w; ++x) {
    for (std::int64_t y = 0; y < h; ++y) col[static_cast<std::size_t>(y)] = g[static_cast<std::size_t>(y * w + x)];
    dt_1d(col.data(), out.data(), h, v, z);
    for (std::int64_t y = 0; y < h; ++y) g[static_cast<std::size_t>(y * w + x)] = out[static_cast<std::size_t>(y)];
  }
  for (std::int64_t y = 0; y < h; ++y) {
    double* row = g.data() + y * w;
    dt_1d(row, out.data(), w, v, z);
    std::copy(out.begin(), out.begin() + w, row);
  }
  return g;
}

double Threshold::resolve(std::int64_t h, std::int64_t w) const {
  if (mode == Mode::absolute) return value;
  return std::ceil(value * std::sqrt(double(h * h + w * w)));
}

std::string Threshold::describe() const {
  return mode == Mode::absolute ? "absolute" : "relative";
}

namespace {

// Fraction of points in `a` within radius of some point in `b`.
std::int64_t matched(std::span<const std::uint8_t> a, const std::vector<double>& dist_to_b, double r2) {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] && dist_to_b[i] <= r2;
  return n;
}

}  // namespace

FScore match_boundaries(std::span<const std::uint8_t> pred_b, std::span<const std::uint8_t> label_b, std::int64_t h,
                        std::int64_t w, double radius) {
  FScore s;
  for (auto v : pred_b) s.pred_points += v != 0;
  for (auto v : label_b) s.label_points += v != 0;
  if (s.pred_points == 0 && s.label_points == 0) {
    s.precision = s.recall = s.f = 1.0;
    return s;
  }
  if (s.pred_points == 0 || s.label_points == 0) return s;
  const double r2 = radius * radius;
  const auto to_label = squared_distance_transform(label_b, h, w);
  const auto to_pred = squared_distance_transform(pred_b, h, w);
  s.precision = double(matched(pred_b, to_label, r2)) / double(s.pred_points);
  s.recall = double(matched(label_b, to_pred, r2)) / double(s.label_points);
  s.f = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

BoundaryResult boundary_fscore(const LabelMap& pred, const LabelMap& label, int num_classes, Threshold t) {
  if (pred.h != label.h || pred.w != label.w) throw ShapeError("prediction and label sizes differ");
  const double r = t.resolve(label.h, label.w);
  BoundaryResult out;
  double sum = 0;
  int n = 0;
  for (int c = 0; c < num_classes; ++c) {
    const auto pb = boundary_map(pred, c), lb = boundary_map(label, c);
    const bool any = std::any_of(pb.begin(), pb.end(), [](auto v) { return v; }) ||
                     std::any_of(lb.begin(), lb.end(), [](auto v) { return v; });
    if (!any) {
      out.per_class.emplace_back();
      continue;
    }
    const double f = match_boundaries(pb, lb, label.h, label.w, r).f;
    out.per_class.emplace_back(f);
    sum += f;
    ++n;
  }
  if (n > 0) out.mean = sum / n;
  return out;
}

FScore imagewise_fscore(const LabelMap& pred, const LabelMap& label, Threshold t) {
  if (pred.h != label.h || pred.w != label.w) throw ShapeError("prediction and label sizes differ");
  return match_boundaries(boundary_map(pred), boundary_map(label), label.h, label.w, t.resolve(label.h, label.w));
}

LabelMap center_crop(const LabelMap& m, std::int64_t crop_h, std::int64_t crop_w) {
  if (crop_h < 1 || crop_w < 1 || crop_h > m.h || crop_w > m.w) {
    throw ShapeError("crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) + " does not fit in " +
                     std::to_string(m.h) + "x" + std::to_string(m.w));
  }
  const std::int64_t y0 = (m.h - crop_h) / 2, x0 = (m.w - crop_w) / 2;
  LabelMap out(crop_h, crop_w);
  for (std::int64_t y = 0; y < crop_h; ++y)
    for (std::int64_t x = 0; x < crop_w; ++x) out.at(y, x) = m.at(y0 + y, x0 + x);
  return out;
}

double crop_eval(const LabelMap& pred, const LabelMap& label, std::int64_t crop_h, std::int64_t crop_w,
                 const std::function<double(const LabelMap&, const LabelMap&)>& metric) {
  if (pred.h != label.h || pred.w != label.w) throw ShapeError("prediction and label sizes differ");
  return metric(center_crop(pred, crop_h, crop_w), center_crop(label, crop_h, crop_w));
}

InterLevelFlops flops_interlevel(std::uint64_t d_hi, std::uint64_t d_lo, std::uint64_t h_hi, std::uint64_t w_hi,
                                 std::uint64_t h_lo, std::uint64_t w_lo) {
  return {2 * h_hi * w_hi * d_hi * d_lo + 2 * h_lo * w_lo * d_lo * d_lo, 32 * d_lo * h_hi * w_hi};
}

SelfAttentionFlops flops_selfattention(std::uint64_t h, std::uint64_t w, std::uint64_t d) {
  return {4 * h * w * d * d, 2 * d * h * h * w * w};
}

nlohmann::json FlopsReport::to_json() const {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : components) comps.push_back({{"name", c.name}, {"calls", c.calls}, {"fc", c.fc}, {"dot", c.dot}});
  return {{"components", comps},
          {"fc_total", fc_total},
          {"dot_total", dot_total},
          {"total", total()},
          {"selfattention_reference", selfattention_reference}};
}

FlopsReport config_flops(const ModelConfig& cfg, std::int64_t h, std::int64_t w, std::int64_t batch) {
  cfg.validate();
  if (h <= 0 || w <= 0 || h % 32 != 0 || w % 32 != 0) throw ShapeError("input size must be a positive multiple of 32");
  FlopsReport r;
  std::int64_t hh = h, ww = w;
  std::int64_t prev_h = 0, prev_w = 0;
  for (int l = 0; l < 4; ++l) {
    const auto& sc = cfg.stages[static_cast<std::size_t>(l)];
    const std::int64_t nh = kernels::conv_out_extent(hh, sc.K, sc.S, sc.K / 2);
    const std::int64_t nw = kernels::conv_out_extent(ww, sc.K, sc.S, sc.K / 2);
    if (sc.hila) {
      const auto& lo = cfg.stages[static_cast<std::size_t>(l - 1)];
      const auto f = flops_interlevel(static_cast<std::uint64_t>(sc.d), static_cast<std::uint64_t>(lo.d),
                                      static_cast<std::uint64_t>(nh), static_cast<std::uint64_t>(nw),
                                      static_cast<std::uint64_t>(prev_h), static_cast<std::uint64_t>(prev_w));
      std::uint64_t wrapped = 0;
      for (int i = 1; i <= sc.N; ++i) wrapped += sc.wraps_block(i);
      const std::uint64_t td = wrapped > 0 ? wrapped - 1 : 0;
      const auto b = static_cast<std::uint64_t>(batch);
      const std::string sn = "stage" + std::to_string(l + 1);
      r.components.push_back({sn + ".bottom_up", wrapped * b, f.fc * wrapped * b, f.dot * wrapped * b});
      r.components.push_back({sn + ".top_down", td * b, f.fc * td * b, f.dot * td * b});
      r.selfattention_reference +=
          flops_selfattention(static_cast<std::uint64_t>(nh), static_cast<std::uint64_t>(nw), static_cast<std::uint64_t>(sc.d)).total() *
          wrapped * b;
    }
    prev_h = nh;
    prev_w = nw;
    hh = nh;
    ww = nw;
  }
  for (const auto& c : r.components) {
    r.fc_total += c.fc;
    r.dot_total += c.dot;
  }
  return r;
}

nlohmann::json EvalSummary::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& v : iou.per_class) per.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  return {{"miou", iou.miou ? nlohmann::json(*iou.miou) : nlohmann::json(nullptr)},
          {"per_class_iou", per},
          {"pixel_accuracy", iou.pixel_accuracy},
          {"fscore_3px", boundary_f},
          {"imagewise_fscore", imagewise_f},
          {"fscore_threshold", {{"mode", threshold.describe()}, {"value", threshold.value}, {"pixels", threshold_px}}}};
}

EvalSummary evaluate(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& labels, int num_classes,
                     Threshold t, int ignore_index) {
  if (preds.size() != labels.size()) throw ContractError("prediction and label counts differ");
  EvalSummary s;
  s.threshold = t;
  ConfusionAccumulator acc(num_classes, ignore_index);
  double bf = 0, iw = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    acc.add(preds[i], labels[i]);
    bf += boundary_fscore(preds[i], labels[i], num_classes, t).mean.value_or(1.0);
    iw += imagewise_fscore(preds[i], labels[i], t).f;
    s.threshold_px = t.resolve(labels[i].h, labels[i].w);
  }
  s.iou = acc.result();
  if (!preds.empty()) {
    s.boundary_f = bf / double(preds.size());
    s.imagewise_f = iw / double(preds.size());
  }
  return s;
}

}  // namespace hila
