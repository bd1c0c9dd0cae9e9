#include "hila/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace hila {

Batch make_batch(const std::vector<SegSample>& data, std::span<const std::size_t> idx, Rng* aug, int pad,
                 int ignore_index) {
  if (idx.empty()) throw ContractError("empty batch");
  const std::int64_t h = data[idx[0]].image.dim(0), w = data[idx[0]].image.dim(1);
  const auto b = static_cast<std::int64_t>(idx.size());
  Batch out{Tensor<float>({b, h, w, 3}), std::vector<std::uint8_t>(static_cast<std::size_t>(b * h * w)), h, w};
  for (std::int64_t n = 0; n < b; ++n) {
    const SegSample& s = data[idx[static_cast<std::size_t>(n)]];
    if (s.image.dim(0) != h || s.image.dim(1) != w) throw ShapeError("samples in a batch must share a size");
    bool flip = false;
    std::int64_t dy = 0, dx = 0;
    if (aug) {
      flip = aug->randint(0, 1) == 1;
      dy = aug->randint(-pad, pad);
      dx = aug->randint(-pad, pad);
    }
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sy = y + dy, sx0 = x + dx;
        const std::int64_t sx = flip ? w - 1 - sx0 : sx0;
        const std::int64_t o = (n * h + y) * w + x;
        if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
          out.labels[static_cast<std::size_t>(o)] = static_cast<std::uint8_t>(ignore_index);
          continue;  // image stays zero
        }
        const float* src = s.image.ptr() + (sy * w + sx) * 3;
        std::copy(src, src + 3, out.images.ptr() + o * 3);
        out.labels[static_cast<std::size_t>(o)] = static_cast<std::uint8_t>(s.labels.at(sy, sx));
      }
    }
  }
  return out;
}

namespace {

bool all_finite(const Tensor<float>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

void check_finite(const Model<float>& model, const std::vector<Tensor<float>>& grads, double loss, int step, double lr,
                  const std::vector<std::size_t>& idx) {
  bool ok = std::isfinite(loss);
  for (const auto& g : grads) ok = ok && all_finite(g);
  if (ok) return;
  nlohmann::json bad = nlohmann::json::array();
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& value = model.params().vars()[i].value();
    if (all_finite(value) && all_finite(grads[i])) continue;
    bad.push_back({{"name", model.params().names()[i]},
                   {"value_finite", all_finite(value)},
                   {"grad_finite", all_finite(grads[i])}});
  }
  nlohmann::json diag = {{"step", step + 1},
                         {"lr", lr},
                         {"loss", std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json(std::to_string(loss))},
                         {"batch", idx},
                         {"non_finite", bad}};
  throw DivergenceError("non-finite loss or gradient at step " + std::to_string(step + 1), std::move(diag));
}

}  // namespace

TrainResult train_model(Model<float>& model, const std::vector<SegSample>& data, const TrainOptions& opt,
                        const std::function<void(const TrainLog&)>& on_log) {
  if (data.empty()) throw ContractError("no training data");
  if (opt.batch < 1 || opt.steps < 0) throw ConfigError("batch must be >= 1 and steps >= 0");
  const auto start = std::chrono::steady_clock::now();
  Rng order(opt.seed ^ 0x5EEDF00DULL), aug(opt.seed ^ 0xA11CE5ULL);

  AdamWState<float> state;
  state.lr = opt.lr;
  state.weight_decay = opt.weight_decay;
  state.total_steps = opt.steps;
  state.power = opt.power;
  state.warmup_steps = opt.warmup;
  std::vector<Tensor<float>*> params;
  for (const auto& v : model.params().vars()) {
    Var<float> handle = v;
    params.push_back(&handle.mutable_value());
  }

  std::vector<std::size_t> perm(data.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t cursor = perm.size();
  std::vector<std::size_t> idx;
  TrainResult result;
  for (int step = 0; step < opt.steps; ++step) {
    idx.clear();
    while (idx.size() < static_cast<std::size_t>(opt.batch)) {
      if (cursor == perm.size()) {
        for (std::size_t i = perm.size(); i > 1; --i)
          std::swap(perm[i - 1], perm[static_cast<std::size_t>(order.randint(0, static_cast<std::int64_t>(i) - 1))]);
        cursor = 0;
      }
      idx.push_back(perm[cursor++]);
    }
    const Batch b = make_batch(data, idx, opt.augment ? &aug : nullptr, opt.augment ? opt.crop_pad : 0);
    const Var<float> loss = segmentation_loss(model.forward(Var<float>(b.images)), b.labels, b.h, b.w);
    const Gradients<float> g = backward(loss);
    std::vector<Tensor<float>> grads;
    grads.reserve(params.size());
    for (const auto& v : model.params().vars()) grads.push_back(g.at(v));
    const double lr = state.scheduled_lr();
    const double l = loss.value().item();
    check_finite(model, grads, l, step, lr, idx);
    adamw_step(params, grads, state);
    result.losses.push_back(l);
    if (on_log && opt.log_every > 0 && ((step + 1) % opt.log_every == 0 || step + 1 == opt.steps)) {
      on_log({step + 1, l, lr});
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::vector<LabelMap> predict(const Model<float>& model, const std::vector<SegSample>& data, int batch) {
  NoGradGuard guard;
  std::vector<LabelMap> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch)); ++i) idx.push_back(i);
    const Batch b = make_batch(data, idx);
    const auto logits = model.forward(Var<float>(b.images)).value();
    const auto pred = predict_labels(logits, b.h, b.w);
    const std::size_t plane = static_cast<std::size_t>(b.h * b.w);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      LabelMap m(b.h, b.w);
      for (std::size_t p = 0; p < plane; ++p) m.v[p] = pred[n * plane + p];
      out.push_back(std::move(m));
    }
  }
  return out;
}

std::vector<LabelMap> labels_of(const std::vector<SegSample>& data) {
  std::vector<LabelMap> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(s.labels);
  return out;
}

}  // namespace hila
