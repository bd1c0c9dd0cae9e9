#include "hila/hierarchy.hpp"

#include <algorithm>
#include <cmath>

namespace hila {

double HierarchyMask::row_sum(std::int64_t r) const {
  double s = 0;
  for (const auto& e : rows[static_cast<std::size_t>(r)]) s += e.w;
  return s;
}

Tensor<double> HierarchyMask::dense() const {
  const std::int64_t cols = tgt_h * tgt_w;
  Tensor<double> t({src_h * src_w, cols});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (const auto& e : rows[r]) t[static_cast<std::int64_t>(r) * cols + e.col] = e.w;
  return t;
}

HierarchyMask identity_mask(int stage, std::int64_t h, std::int64_t w) {
  HierarchyMask m{stage, stage, h, w, h, w, {}, true};
  m.rows.resize(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h * w; ++i) m.rows[static_cast<std::size_t>(i)] = {{i, 1.0}};
  return m;
}

template <typename T>
HierarchyMask from_topdown(const InterLevelWeights<T>& w, int source_stage, std::int64_t batch) {
  if (w.direction != Direction::top_down) throw ContractError("hierarchy masks are built from top-down weights");
  const PatchGeometry& g = w.geometry;
  const std::int64_t slots = g.slots(), L = w.hi_h * w.hi_w;
  if (w.m.rank() != 3 || w.m.dim(1) != L || w.m.dim(2) != slots) {
    throw ShapeError("top-down weights " + shape_str(w.m.shape()) + " do not match their grid");
  }
  if (batch < 0 || batch >= w.m.dim(0)) throw ContractError("batch index out of range");
  HierarchyMask m{source_stage, source_stage - 1, w.hi_h, w.hi_w, w.lo_h, w.lo_w, {}, false};
  m.rows.resize(static_cast<std::size_t>(L));
  for (std::int64_t l = 0; l < L; ++l) {
    const std::int64_t oy = (l / w.hi_w) * g.stride - g.padding, ox = (l % w.hi_w) * g.stride - g.padding;
    auto& row = m.rows[static_cast<std::size_t>(l)];
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const std::int64_t y = oy + ky, x = ox + kx;
        if (y < 0 || y >= w.lo_h || x < 0 || x >= w.lo_w) continue;
        row.push_back({y * w.lo_w + x, static_cast<double>(w.m[(batch * L + l) * slots + ky * g.kernel + kx])});
      }
    }
    std::sort(row.begin(), row.end(), [](const MaskEntry& a, const MaskEntry& b) { return a.col < b.col; });
  }
  return m;
}

HierarchyMask compose(const HierarchyMask& upper, const HierarchyMask& lower) {
  if (upper.target_stage != lower.source_stage || upper.tgt_h != lower.src_h || upper.tgt_w != lower.src_w) {
    throw ContractError("cannot compose stage " + std::to_string(upper.source_stage) + "->" +
                        std::to_string(upper.target_stage) + " with " + std::to_string(lower.source_stage) + "->" +
                        std::to_string(lower.target_stage));
  }
  HierarchyMask out{upper.source_stage, lower.target_stage, upper.src_h, upper.src_w, lower.tgt_h, lower.tgt_w, {}, false};
  out.rows.resize(upper.rows.size());
  std::vector<double> acc(static_cast<std::size_t>(lower.tgt_h * lower.tgt_w), 0.0);
  std::vector<char> seen(acc.size(), 0);
  std::vector<std::int64_t> touched;
  for (std::size_t r = 0; r < upper.rows.size(); ++r) {
    touched.clear();
    for (const auto& mid : upper.rows[r]) {
      for (const auto& e : lower.rows[static_cast<std::size_t>(mid.col)]) {
        const auto c = static_cast<std::size_t>(e.col);
        if (!seen[c]) {
          seen[c] = 1;
          touched.push_back(e.col);
        }
        acc[c] += mid.w * e.w;
      }
    }
    std::sort(touched.begin(), touched.end());
    auto& row = out.rows[r];
    row.reserve(touched.size());
    for (std::int64_t c : touched) {
      row.push_back({c, acc[static_cast<std::size_t>(c)]});
      acc[static_cast<std::size_t>(c)] = 0;
      seen[static_cast<std::size_t>(c)] = 0;
    }
  }
  return out;
}

HierarchyMask normalize(HierarchyMask m) {
  for (auto& row : m.rows) {
    double s = 0;
    for (const auto& e : row) s += e.w;
    if (s == 0) {
      row.clear();
      continue;
    }
    for (auto& e : row) e.w /= s;
  }
  m.normalized = true;
  return m;
}

int receptive_window(int source_stage, int target_stage, const PatchGeometry& g) {
  if (source_stage <= target_stage) throw ContractError("receptive window needs source stage above target stage");
  int w = g.kernel;
  for (int n = 1; n < source_stage - target_stage; ++n) w = g.kernel + (w - 1) * g.stride;
  return w;
}

Window support_window(std::int64_t qy, std::int64_t qx, const std::vector<PatchGeometry>& levels) {
  if (levels.empty()) return {qy, qx, 1};
  Window win{qy, qx, 1};
  for (const auto& g : levels) {
    win.top = win.top * g.stride - g.padding;
    win.left = win.left * g.stride - g.padding;
    win.side = g.kernel + (win.side - 1) * g.stride;
  }
  return win;
}

template <typename T>
HierarchyMask hierarchy_from_output(const EncoderOutput<T>& out, int source_stage, int target_stage,
                                    std::int64_t batch) {
  if (source_stage > 4 || target_stage < 1 || source_stage <= target_stage) {
    throw ContractError("need 4 >= source stage > target stage >= 1");
  }
  std::optional<HierarchyMask> acc;
  for (int s = source_stage; s > target_stage; --s) {
    const auto& w = out.td_weights[static_cast<std::size_t>(s - 1)];
    if (!w) {
      throw ContractError("stage " + std::to_string(s) + " has no recorded top-down weights (HILA disabled there?)");
    }
    HierarchyMask step = from_topdown(*w, s, batch);
    acc = acc ? compose(*acc, step) : std::move(step);
  }
  return normalize(std::move(*acc));
}

Image render_mask(const HierarchyMask& m, std::int64_t qy, std::int64_t qx, const Image& base,
                  const RenderOptions& opt, const std::optional<Window>& window) {
  if (qy < 0 || qy >= m.src_h || qx < 0 || qx >= m.src_w) {
    throw ContractError("query (" + std::to_string(qy) + "," + std::to_string(qx) + ") outside the " +
                        std::to_string(m.src_h) + "x" + std::to_string(m.src_w) + " source grid");
  }
  if (base.h % m.tgt_h != 0 || base.w % m.tgt_w != 0) {
    throw ShapeError("base image " + std::to_string(base.h) + "x" + std::to_string(base.w) +
                     " is not a multiple of the target grid");
  }
  if (opt.alpha == 0) return base;

  std::vector<double> v(static_cast<std::size_t>(m.tgt_h * m.tgt_w), 0.0);
  double mx = 0;
  for (const auto& e : m.rows[static_cast<std::size_t>(qy * m.src_w + qx)]) {
    v[static_cast<std::size_t>(e.col)] = e.w;
    mx = std::max(mx, e.w);
  }
  if (mx > 0)
    for (auto& x : v) x /= mx;

  const std::int64_t sy = base.h / m.tgt_h, sx = base.w / m.tgt_w;
  Image out(base.h, base.w);
  for (std::int64_t y = 0; y < base.h; ++y) {
    for (std::int64_t x = 0; x < base.w; ++x) {
      const std::uint8_t* p = base.px(y, x);
      const double gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
      const double a = opt.alpha * v[static_cast<std::size_t>((y / sy) * m.tgt_w + x / sx)];
      for (int c = 0; c < 3; ++c) {
        const double val = (1 - a) * gray + a * opt.tint[static_cast<std::size_t>(c)];
        out.px(y, x)[c] = static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 255.0)));
      }
    }
  }
  if (window) {
    const std::int64_t y0 = window->top * sy, x0 = window->left * sx;
    const std::int64_t y1 = (window->top + window->side) * sy - 1, x1 = (window->left + window->side) * sx - 1;
    auto paint = [&](std::int64_t y, std::int64_t x) {
      if (y < 0 || y >= out.h || x < 0 || x >= out.w) return;
      std::copy(opt.box.begin(), opt.box.end(), out.px(y, x));
    };
    for (std::int64_t x = x0; x <= x1; ++x) {
      paint(y0, x);
      paint(y1, x);
    }
    for (std::int64_t y = y0; y <= y1; ++y) {
      paint(y, x0);
      paint(y, x1);
    }
  }
  return out;
}

template HierarchyMask from_topdown<float>(const InterLevelWeights<float>&, int, std::int64_t);
template HierarchyMask from_topdown<double>(const InterLevelWeights<double>&, int, std::int64_t);
template HierarchyMask hierarchy_from_output<float>(const EncoderOutput<float>&, int, int, std::int64_t);
template HierarchyMask hierarchy_from_output<double>(const EncoderOutput<double>&, int, int, std::int64_t);

}  // namespace hila
