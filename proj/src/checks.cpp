#include "hila/checks.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>

#include "hila/encoder.hpp"
#include "hila/gradcheck.hpp"
#include "hila/hierarchy.hpp"
#include "hila/mac_counter.hpp"
#include "hila/metrics.hpp"
#include "hila/ops.hpp"
#include "hila/rng.hpp"

namespace hila {

void SuiteResult::expect(bool ok, const std::string& what) {
  if (ok) return;
  passed = false;
  if (failures.size() < 20) failures.push_back(what);
}

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-scale, scale));
  return t;
}

template <typename T>
void randomize(ParamStore<T>& ps, Rng& rng, double scale) {
  for (Var<T> v : ps.vars())
    for (auto& x : v.mutable_value().data()) x = static_cast<T>(rng.uniform(-scale, scale));
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

template <typename Fn>
SuiteResult timed(const std::string& name, Fn body) {
  SuiteResult r;
  r.name = name;
  const auto start = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.expect(false, std::string("exception: ") + e.what());
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::vector<PatchGeometry> hila_geometries(const ModelConfig& cfg) {
  std::vector<PatchGeometry> out;
  for (const auto& s : cfg.stages) {
    if (!s.hila) continue;
    const auto g = s.geometry();
    if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
  }
  if (out.empty()) out.push_back(PatchGeometry{});
  return out;
}

template <typename T>
double oracle_case(const PatchGeometry& g, std::int64_t b, std::int64_t hl, std::int64_t wl, std::int64_t d_lo,
                   std::int64_t d_hi, Rng& rng, double* weight_diff) {
  ParamStore<T> ps(rng.next_u64());
  const auto p = make_interlevel(ps, "td", d_lo, d_hi, g);
  randomize(ps, rng, 0.5);
  const auto x_lo = random_tensor<T>({b, hl, wl, d_lo}, rng);
  const auto x_hi = random_tensor<T>({b, g.out_extent(hl), g.out_extent(wl), d_hi}, rng);
  InterLevelWeights<T> w;
  const auto eff = top_down_attention(Var<T>(x_lo), Var<T>(x_hi), p, g, &w);
  Tensor<T> w_ref;
  const auto ref = top_down_attention_naive(x_lo, x_hi, p, g, &w_ref);
  *weight_diff = static_cast<double>(max_abs_diff(w.m, w_ref));
  return static_cast<double>(max_abs_diff(eff.value(), ref));
}

}  // namespace

SuiteResult check_oracle(const ModelConfig& cfg, const CheckOptions& opt) {
  return timed("oracle", [&](SuiteResult& r) {
    Rng rng(opt.seed ^ 0x0AC1EULL);
    const auto geoms = hila_geometries(cfg);
    double worst32 = 0, worst64 = 0;
    int n = 0;
    for (int c = 0; c < opt.oracle_configs; ++c) {
      const PatchGeometry g = geoms[static_cast<std::size_t>(c) % geoms.size()];
      // Lower extents are even and at most 8x12 so the stride-2 windows tile them.
      const std::int64_t hl = 2 * rng.randint(1, 4), wl = 2 * rng.randint(1, 6);
      if (hl + 2 * g.padding < g.kernel || wl + 2 * g.padding < g.kernel) continue;
      const std::int64_t d_lo = rng.randint(0, 1) ? 8 : 4, d_hi = rng.randint(0, 1) ? 16 : 8;
      const std::int64_t b = rng.randint(1, 2);
      double wd32 = 0, wd64 = 0;
      const double e32 = oracle_case<float>(g, b, hl, wl, d_lo, d_hi, rng, &wd32);
      const double e64 = oracle_case<double>(g, b, hl, wl, d_lo, d_hi, rng, &wd64);
      worst32 = std::max({worst32, e32, wd32});
      worst64 = std::max({worst64, e64, wd64});
      const std::string tag = std::to_string(hl) + "x" + std::to_string(wl) + " d_lo=" + std::to_string(d_lo) +
                              " d_hi=" + std::to_string(d_hi) + " k=" + std::to_string(g.kernel);
      r.expect(e32 < 1e-5 && wd32 < 1e-5, "float32 " + tag + ": |diff| " + fmt(std::max(e32, wd32)));
      r.expect(e64 < 1e-10 && wd64 < 1e-10, "float64 " + tag + ": |diff| " + fmt(std::max(e64, wd64)));
      ++n;
    }
    r.expect(n >= opt.oracle_configs, "only " + std::to_string(n) + " configurations were valid");
    r.metrics["configs"] = n;
    r.metrics["max_abs_f32"] = worst32;
    r.metrics["max_abs_f64"] = worst64;
  });
}

namespace {

template <typename T>
void normalization_body(const ModelConfig& cfg, const CheckOptions& opt, SuiteResult& r) {
  Model<T> model(cfg, opt.seed);
  Rng rng(opt.seed ^ 0x4E0AULL);
  randomize(model.params(), rng, 0.4);
  ForwardOptions fo;
  fo.record_weights = true;
  const auto out = model.forward_encoder(Var<T>(random_tensor<T>({2, 64, 64, 3}, rng)), fo);

  double worst_bu = 0, worst_td = 0, worst_comp = 0;
  std::int64_t outside = 0;
  for (int s = 2; s <= 4; ++s) {
    const auto& sc = cfg.stages[static_cast<std::size_t>(s - 1)];
    if (!sc.hila) continue;
    const auto& bu = out.bu_weights[static_cast<std::size_t>(s - 1)];
    r.expect(bu.has_value(), "stage " + std::to_string(s) + " recorded no bottom-up weights");
    if (bu) {
      const std::int64_t k2 = bu->m.dim(2);
      for (std::int64_t row = 0; row < bu->m.numel() / k2; ++row) {
        double sum = 0;
        for (std::int64_t j = 0; j < k2; ++j) sum += static_cast<double>(bu->m[row * k2 + j]);
        worst_bu = std::max(worst_bu, std::abs(sum - 1));
      }
    }
    const auto& td = out.td_weights[static_cast<std::size_t>(s - 1)];
    if (td) {
      const auto& w = *td;
      const std::int64_t b = w.m.dim(0);
      const auto folded = kernels::fold(w.m.reshaped({b, w.m.dim(1), w.m.dim(2), 1}), w.lo_h, w.lo_w, w.geometry);
      const auto cover = kernels::fold(Tensor<T>::full({b, w.m.dim(1), w.m.dim(2), 1}, T(1)), w.lo_h, w.lo_w, w.geometry);
      for (std::int64_t i = 0; i < folded.numel(); ++i)
        if (cover[i] > 0) worst_td = std::max(worst_td, std::abs(static_cast<double>(folded[i]) - 1));
    }
  }

  // Every composition the recorded weights allow.
  for (int src = 2; src <= 4; ++src) {
    for (int tgt = src - 1; tgt >= 1; --tgt) {
      bool available = true;
      for (int s = src; s > tgt; --s) available = available && out.td_weights[static_cast<std::size_t>(s - 1)].has_value();
      if (!available) continue;
      std::vector<PatchGeometry> levels;
      for (int s = src; s > tgt; --s) levels.push_back(cfg.stages[static_cast<std::size_t>(s - 1)].geometry());
      for (std::int64_t b = 0; b < 2; ++b) {
        const auto m = hierarchy_from_output(out, src, tgt, b);
        for (std::int64_t row = 0; row < m.src_h * m.src_w; ++row) {
          worst_comp = std::max(worst_comp, std::abs(m.row_sum(row) - 1));
          const Window win = support_window(row / m.src_w, row % m.src_w, levels);
          for (const auto& e : m.rows[static_cast<std::size_t>(row)]) outside += !win.contains(e.col / m.tgt_w, e.col % m.tgt_w);
        }
      }
      r.metrics["window_side_" + std::to_string(src) + "_" + std::to_string(tgt)] =
          support_window(0, 0, levels).side;
    }
  }
  r.expect(worst_bu < 1e-5, "bottom-up row sums off by " + fmt(worst_bu));
  r.expect(worst_td < 1e-5, "folded top-down weights off by " + fmt(worst_td));
  r.expect(worst_comp < 1e-5, "composed rows off by " + fmt(worst_comp));
  r.expect(outside == 0, std::to_string(outside) + " composed entries fall outside their window");
  r.metrics["bottom_up_row_sum"] = worst_bu;
  r.metrics["top_down_fold"] = worst_td;
  r.metrics["composed_row_sum"] = worst_comp;
  r.metrics["entries_outside_window"] = static_cast<double>(outside);
}

}  // namespace

SuiteResult check_normalization(const ModelConfig& cfg, const CheckOptions& opt) {
  return timed("normalization", [&](SuiteResult& r) {
    opt.float64 ? normalization_body<double>(cfg, opt, r) : normalization_body<float>(cfg, opt, r);
    // Window sides for the default geometry.
    const PatchGeometry g;
    r.expect(receptive_window(2, 1, g) == 4 && receptive_window(3, 1, g) == 10 && receptive_window(4, 1, g) == 22,
             "receptive windows are not 4/10/22");
  });
}

SuiteResult check_adjointness(const ModelConfig& cfg, const CheckOptions& opt) {
  return timed("adjointness", [&](SuiteResult& r) {
    Rng rng(opt.seed ^ 0xAD10ULL);
    auto dot = [](const Tensor<double>& a, const Tensor<double>& b) {
      double s = 0;
      for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
      return s;
    };
    double worst = 0;
    for (const auto& g : hila_geometries(cfg)) {
      for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{4, 6}, {8, 8}, {6, 12}}) {
        const auto x = random_tensor<double>({2, h, w, 3}, rng);
        const auto p = kernels::unfold(x, g);
        const auto y = random_tensor<double>(p.shape(), rng);
        const double lhs = dot(p, y), rhs = dot(x, kernels::fold(y, h, w, g));
        worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
      }
    }
    const auto x = random_tensor<double>({1, 5, 7, 2}, rng);
    const auto up = kernels::bilinear_resize(x, 9, 4);
    const auto y = random_tensor<double>(up.shape(), rng);
    const double lhs = dot(up, y), rhs = dot(x, kernels::bilinear_resize_backward(y, 5, 7));
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
    r.expect(worst < 1e-12, "adjoint mismatch " + fmt(worst));
    r.metrics["max_rel"] = worst;
  });
}

namespace {

using V = Var<double>;
using Vs = std::vector<V>;
using Fn = std::function<V(const Vs&)>;

// Projection of y onto a fixed direction so every element feeds the scalar.
V probe(const V& y, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(y, V(random_tensor<double>(y.shape(), rng))));
}

struct OpCase {
  std::string name;
  Fn fn;
  std::vector<Shape> shapes;
  double range = 1.0;
};

std::vector<OpCase> op_cases(const PatchGeometry& g) {
  const kernels::ConvSpec dense{2, 1, false}, dw{1, 1, true};
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 1, 1});
  const std::int64_t wt = 3, ht = 2, lo_h = (ht - 1) * g.stride - 2 * g.padding + g.kernel,
                     lo_w = (wt - 1) * g.stride - 2 * g.padding + g.kernel;
  return {
      {"add", [](const Vs& v) { return probe(ops::add(v[0], v[1]), 1); }, {{3, 4}, {3, 4}}},
      {"mul", [](const Vs& v) { return probe(ops::mul(v[0], v[1]), 2); }, {{3, 4}, {3, 4}}},
      {"scale", [](const Vs& v) { return probe(ops::scale(v[0], -1.7), 3); }, {{5}}},
      {"axpby", [](const Vs& v) { return probe(ops::axpby(0.3, v[0], 1.2, v[1]), 4); }, {{2, 3}, {2, 3}}},
      {"add_lastdim", [](const Vs& v) { return probe(ops::add_lastdim(v[0], v[1]), 5); }, {{2, 3, 4}, {4}}},
      {"mean", [](const Vs& v) { return ops::mean(ops::mul(v[0], v[0])); }, {{7}}},
      {"matmul", [](const Vs& v) { return probe(ops::matmul(v[0], v[1]), 6); }, {{2, 3, 5}, {5, 4}}},
      {"matmul_tt", [](const Vs& v) { return probe(ops::matmul(v[0], v[1], true, true), 7); }, {{2, 5, 3}, {2, 4, 5}}},
      {"linear", [](const Vs& v) { return probe(ops::linear(v[0], v[1], v[2]), 8); }, {{2, 3, 4}, {4, 5}, {5}}},
      {"softmax", [](const Vs& v) { return probe(ops::softmax_lastdim(v[0]), 9); }, {{3, 7}}, 2.0},
      {"softmax_masked", [=](const Vs& v) { return probe(ops::softmax_lastdim(v[0], mask), 10); }, {{3, 5}}, 2.0},
      {"layer_norm", [](const Vs& v) { return probe(ops::layer_norm(v[0], v[1], v[2], 1e-6), 11); },
       {{3, 8}, {8}, {8}}, 2.0},
      {"gelu", [](const Vs& v) { return probe(ops::gelu(v[0]), 12); }, {{10}}, 3.0},
      {"conv2d", [=](const Vs& v) { return probe(ops::conv2d(v[0], v[1], v[2], dense), 13); },
       {{2, 5, 5, 3}, {3, 3, 3, 2}, {2}}},
      {"conv2d_depthwise", [=](const Vs& v) { return probe(ops::conv2d(v[0], v[1], v[2], dw), 14); },
       {{1, 4, 5, 3}, {3, 3, 1, 3}, {3}}},
      {"unfold", [=](const Vs& v) { return probe(ops::unfold(v[0], g), 15); }, {{1, lo_h, lo_w, 2}}},
      {"fold", [=](const Vs& v) { return probe(ops::fold(v[0], lo_h, lo_w, g), 16); },
       {{1, ht * wt, g.slots(), 2}}},
      {"cover_softmax", [=](const Vs& v) { return probe(ops::cover_softmax(v[0], lo_h, lo_w, g), 17); },
       {{2, ht * wt, g.slots()}}, 2.0},
      {"bilinear_resize", [](const Vs& v) { return probe(ops::bilinear_resize(v[0], 7, 3), 18); }, {{1, 3, 5, 2}}},
      {"reshape", [](const Vs& v) { return probe(ops::reshape(v[0], {6, 2}), 19); }, {{3, 4}}},
      {"permute", [](const Vs& v) { return probe(ops::permute(v[0], {0, 2, 1, 3}), 20); }, {{2, 3, 4, 2}}},
      {"concat", [](const Vs& v) { return probe(ops::concat_lastdim(Vs{v[0], v[1]}), 21); }, {{2, 3, 2}, {2, 3, 4}}},
      {"pad_crop", [](const Vs& v) { return probe(ops::crop_top_left(ops::pad_bottom_right(v[0], 2, 1), 3, 5), 22); },
       {{1, 3, 4, 2}}},
      {"cross_entropy", [](const Vs& v) { return ops::cross_entropy(v[0], {0, 2, 255, 1, 1, 0}, 255); }, {{1, 2, 3, 3}}},
  };
}

// Rebuilds a model from leaves and returns its loss, so parameter FD runs through the real graph.
struct ModelLoss {
  ModelConfig cfg;
  std::vector<std::string> names;
  std::uint64_t seed;

  Model<double> build(const Vs& leaves) const {
    ParamStore<double> ps(seed);
    for (std::size_t i = 0; i < leaves.size(); ++i) ps.adopt(names[i], leaves[i]);
    return Model<double>(cfg, std::move(ps));
  }
};

std::vector<std::pair<std::size_t, std::int64_t>> sample_probes(const std::vector<Tensor<double>>& inputs,
                                                                const std::vector<std::size_t>& allowed, int count,
                                                                Rng& rng) {
  std::vector<std::pair<std::size_t, std::int64_t>> probes;
  while (static_cast<int>(probes.size()) < count) {
    const std::size_t t = allowed[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(allowed.size()) - 1))];
    probes.emplace_back(t, rng.randint(0, inputs[t].numel() - 1));
  }
  return probes;
}

}  // namespace

SuiteResult check_gradients(const ModelConfig& cfg, const CheckOptions& opt) {
  return timed("gradients", [&](SuiteResult& r) {
    constexpr double kOpTol = 1e-5;
    const double composed_tol = opt.float64 ? 1e-5 : 1e-3;
    Rng rng(opt.seed ^ 0x6AD5ULL);

    double worst_op = 0;
    for (const auto& g : hila_geometries(cfg)) {
      for (const auto& c : op_cases(g)) {
        std::vector<Tensor<double>> inputs;
        for (const auto& s : c.shapes) inputs.push_back(random_tensor<double>(s, rng, c.range));
        const double e = grad_check<double>(c.fn, inputs, 1e-4).max_rel_error;
        worst_op = std::max(worst_op, e);
        r.expect(e < kOpTol, c.name + ": relative error " + fmt(e));
      }
    }
    r.metrics["op_max_rel"] = worst_op;

    // Model-level checks run in float64 clones of the float32 initialization.
    const Model<float> init(cfg, opt.seed);
    Model<double> base = Model<double>::from(init);
    randomize(base.params(), rng, 0.2);
    ModelLoss ml{cfg, base.params().names(), opt.seed};
    std::vector<Tensor<double>> inputs;
    for (const auto& v : base.params().vars()) inputs.push_back(v.value());

    // One HILA-wrapped stage on random lower-level features: both refined maps feed the loss.
    int stage = -1;
    for (int i = 3; i >= 1; --i)
      if (cfg.stages[static_cast<std::size_t>(i)].hila) stage = i;
    if (stage > 0) {
      const auto& lo = cfg.stages[static_cast<std::size_t>(stage - 1)];
      const std::int64_t side = 8;
      const auto x_lo = random_tensor<double>({1, side, side, lo.d}, rng);
      auto loss = [&](const Vs& leaves) {
        const Model<double> m = ml.build(leaves);
        FeatureMap<double> prev{V(x_lo), stage, 0};
        const auto cur = m.run_stage(stage, prev.data, &prev, nullptr, nullptr, nullptr);
        return ops::add(probe(cur.data, 31), probe(prev.data, 32));
      };
      std::vector<std::size_t> allowed;
      const std::string prefix = "s" + std::to_string(stage + 1) + ".";
      for (std::size_t i = 0; i < ml.names.size(); ++i)
        if (ml.names[i].rfind(prefix, 0) == 0) allowed.push_back(i);
      const auto res = grad_check_sampled<double>(loss, inputs, sample_probes(inputs, allowed, opt.gradient_probes, rng), 1e-5);
      r.metrics["hila_stage_max_rel"] = res.max_rel_error;
      r.expect(res.max_rel_error < composed_tol,
               "HILA stage " + std::to_string(stage + 1) + ": relative error " + fmt(res.max_rel_error));
    }

    Rng lab(opt.seed ^ 0x1AB5ULL);
    const auto img = random_tensor<double>({1, 32, 32, cfg.input_channels}, rng);
    std::vector<std::uint8_t> labels(32 * 32);
    for (auto& v : labels) v = static_cast<std::uint8_t>(lab.randint(0, cfg.num_classes - 1));
    auto loss = [&](const Vs& leaves) {
      return segmentation_loss(ml.build(leaves).forward(V(img)), labels, 32, 32);
    };
    std::vector<std::size_t> all(inputs.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto res = grad_check_sampled<double>(loss, inputs, sample_probes(inputs, all, opt.gradient_probes, rng), 1e-5);
    r.metrics["model_max_rel"] = res.max_rel_error;
    r.expect(res.max_rel_error < composed_tol,
             "full model: relative error " + fmt(res.max_rel_error));
  });
}

std::int64_t hila_param_overhead(const ModelConfig& cfg, int stage) {
  if (stage < 2 || stage > 4) throw ContractError("HILA overhead is defined for stages 2-4");
  const auto& hi = cfg.stages[static_cast<std::size_t>(stage - 1)];
  const auto& lo = cfg.stages[static_cast<std::size_t>(stage - 2)];
  const std::int64_t p2 = std::int64_t{hi.p_patch} * hi.p_patch;
  auto attn = [&](std::int64_t dq, std::int64_t dc) {
    const std::int64_t d = std::min(dq, dc);
    // two norms, q from the query side, k and v from the context side, f back to the query width, slot bias
    return 2 * dq + 2 * dc + (dq * d + d) + 2 * (dc * d + d) + (d * dq + dq) + p2;
  };
  auto ffn = [](std::int64_t d, std::int64_t e) {
    return 2 * d + (d * e * d + e * d) + (9 * e * d + e * d) + (e * d * d + d);
  };
  auto sra = [&](std::int64_t d, std::int64_t rr, std::int64_t e) {
    std::int64_t n = 2 * d + 4 * (d * d + d);
    if (rr > 1) n += rr * rr * d * d + d + 2 * d;
    return n + ffn(d, e);
  };
  return attn(hi.d, lo.d) + attn(lo.d, hi.d) + ffn(hi.d, hi.E) + ffn(lo.d, hi.E) + sra(lo.d, lo.R, lo.E);
}

SuiteResult check_schedule(const ModelConfig& cfg, const CheckOptions& opt) {
  return timed("schedule", [&](SuiteResult& r) {
    auto expected = [](const StageConfig& s) {
      std::vector<int> wrapped;
      for (int i = 1; i <= s.N; ++i)
        if (s.wraps_block(i)) wrapped.push_back(i);
      return wrapped;
    };
    auto verify = [&](const ModelConfig& c, const std::string& label) {
      const Model<float> m(c, opt.seed);
      Rng rng(opt.seed ^ 0x5C4EULL);
      const auto out = m.forward_encoder(Var<float>(random_tensor<float>({1, 32, 32, c.input_channels}, rng)));
      for (int l = 0; l < 4; ++l) {
        const auto& sc = c.stages[static_cast<std::size_t>(l)];
        const auto wrapped = expected(sc);
        const std::vector<int> td(wrapped.empty() ? wrapped.end() : wrapped.begin() + 1, wrapped.end());
        const auto& tr = out.traces[static_cast<std::size_t>(l)];
        const std::string where = label + " stage " + std::to_string(l + 1);
        r.expect(tr.wrapped_blocks == wrapped, where + ": wrapped blocks differ");
        r.expect(tr.td_blocks == td, where + ": top-down placement differs");
        const int refined = l < 3 ? static_cast<int>(out.traces[static_cast<std::size_t>(l + 1)].td_blocks.size()) : 0;
        r.expect(out.features[static_cast<std::size_t>(l)].iteration == sc.N + refined, where + ": iteration count");
      }
      return out.traces;
    };
    verify(cfg, "config");

    ModelConfig six = cfg;
    for (auto& s : six.stages) s.N = 6, s.s_stride = 3;
    for (int l = 1; l < 4; ++l) six.stages[static_cast<std::size_t>(l)].hila = true;
    const auto traces = verify(six, "N=6,s=3");
    for (int l = 1; l < 4; ++l) {
      const auto& tr = traces[static_cast<std::size_t>(l)];
      r.expect(tr.wrapped_blocks.size() == 2, "N=6,s=3 should wrap exactly two blocks");
      r.expect(!tr.wrapped_blocks.empty() && tr.td_blocks.size() == tr.wrapped_blocks.size() - 1 &&
                   (tr.td_blocks.empty() || tr.td_blocks.front() != tr.wrapped_blocks.front()),
               "first wrapped block must skip the top-down update");
    }
    r.metrics["wrapped_blocks_n6_s3"] = static_cast<double>(traces[1].wrapped_blocks.size());

    // Parameter audit: each HILA stage adds exactly the shared-parameter formula, whatever N is.
    for (int n : {cfg.stages[1].N, cfg.stages[1].N + 3}) {
      ModelConfig off = cfg;
      for (auto& s : off.stages) s.N = n, s.hila = false;
      const std::int64_t base = Model<float>(off, 1).params().count();
      for (int l = 2; l <= 4; ++l) {
        ModelConfig on = off;
        on.stages[static_cast<std::size_t>(l - 1)].hila = true;
        const std::int64_t got = Model<float>(on, 1).params().count() - base;
        const std::int64_t want = hila_param_overhead(on, l);
        r.expect(got == want, "stage " + std::to_string(l) + " N=" + std::to_string(n) + ": overhead " +
                                  std::to_string(got) + ", formula " + std::to_string(want));
        if (n == cfg.stages[1].N) r.metrics["overhead_stage" + std::to_string(l)] = static_cast<double>(got);
      }
    }
  });
}

SuiteResult check_flops(const ModelConfig& cfg, const CheckOptions& opt) {
  return timed("flops", [&](SuiteResult& r) {
    const Model<float> m(cfg, opt.seed);
    Rng rng(opt.seed ^ 0xF10FULL);
    for (std::int64_t side : {32, 64}) {
      mac::Recorder rec;
      (void)m.forward_encoder(Var<float>(random_tensor<float>({1, side, side, cfg.input_channels}, rng)));
      const auto report = config_flops(cfg, side, side, 1);
      std::map<std::string, std::uint64_t> want;
      for (const auto& c : report.components) {
        const std::string dir = c.name.find("bottom_up") != std::string::npos ? "bottom_up" : "top_down";
        want[dir + ".fc"] += c.fc;
        want[dir + ".dot"] += c.dot;
      }
      for (const std::string tag : {"bottom_up.fc", "bottom_up.dot", "top_down.fc", "top_down.dot"}) {
        r.expect(rec.total(tag) == want[tag], std::to_string(side) + "x" + std::to_string(side) + " " + tag +
                                                   ": counted " + std::to_string(rec.total(tag)) + ", closed form " +
                                                   std::to_string(want[tag]));
        r.metrics[tag + "@" + std::to_string(side)] = static_cast<double>(want[tag]);
      }
    }
    // Global attention over an HxW map spends d H^2 W^2 on dot products; the local window 16 d H W.
    for (auto [h, w, d] : {std::tuple<std::uint64_t, std::uint64_t, std::uint64_t>{8, 8, 32}, {16, 32, 64}, {64, 128, 320}}) {
      const auto sa = flops_selfattention(h, w, d);
      const auto il = flops_interlevel(2 * d, d, h, w, 2 * h, 2 * w);
      r.expect(sa.dot == 2 * d * h * h * w * w && il.dot == 2 * 16 * d * h * w && sa.dot * 16 == il.dot * h * w,
               "self-attention reduction ratio at " + std::to_string(h) + "x" + std::to_string(w));
    }
  });
}

std::vector<SuiteResult> run_checks(const ModelConfig& cfg, const CheckOptions& opt) {
  cfg.validate();
  return {check_oracle(cfg, opt),    check_normalization(cfg, opt), check_adjointness(cfg, opt),
          check_gradients(cfg, opt), check_schedule(cfg, opt),      check_flops(cfg, opt)};
}

}  // namespace hila
