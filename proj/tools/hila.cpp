#include <omp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "hila/checkpoint.hpp"
#include "hila/checks.hpp"
#include "hila/hierarchy.hpp"
#include "hila/metrics.hpp"
#include "hila/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hila;

namespace {

struct LoadedConfig {
  ModelConfig cfg;
  std::string path;   // "builtin:tiny" without --config
  std::string bytes;  // what the hash covers
};

LoadedConfig load_config_arg(const std::string& path) {
  if (path.empty()) {
    ModelConfig cfg = tiny_config();
    return {cfg, "builtin:tiny", to_json(cfg).dump()};
  }
  std::string bytes = read_file(path);
  return {parse_config(bytes), path, std::move(bytes)};
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string timestamp() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

// Run directories are append-only: an existing non-empty directory needs --force.
void claim_dir(const std::string& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw ContractError("output directory '" + dir + "' already exists (use --force to replace it)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

// Accepts a run directory (holding checkpoint/) or a checkpoint directory.
std::string checkpoint_dir(const std::string& path) {
  if (fs::exists(fs::path(path) / "checkpoint" / "checkpoint.json")) return (fs::path(path) / "checkpoint").string();
  return path;
}

void write_json(const std::string& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------------------

int cmd_check(const std::string& config_path, std::uint64_t seed, bool f64) {
  const LoadedConfig lc = load_config_arg(config_path);
  CheckOptions opt;
  opt.seed = seed;
  opt.float64 = f64;
  std::printf("%-14s %-6s %8s\n", "suite", "result", "seconds");
  bool all = true;
  std::vector<SuiteResult> results;
  for (auto* suite : {check_oracle, check_normalization, check_adjointness, check_gradients, check_schedule, check_flops}) {
    SuiteResult r = suite(lc.cfg, opt);
    std::printf("%-14s %-6s %8.2f\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.seconds);
    std::fflush(stdout);
    all = all && r.passed;
    results.push_back(std::move(r));
  }
  for (const auto& r : results)
    for (const auto& f : r.failures) std::printf("  %s: %s\n", r.name.c_str(), f.c_str());
  std::printf("%s\n", all ? "all suites passed" : "some suites failed");
  return all ? 0 : 1;
}

struct TrainArgs {
  std::string config, data, out;
  int steps = 2000, batch = 4, log_every = 50, warmup = 100;
  double lr = 1e-3, weight_decay = 0.01;
  std::uint64_t seed = 0;
  bool force = false, no_augment = false;
};

int cmd_train(const TrainArgs& a, const std::string& cmdline) {
  const LoadedConfig lc = load_config_arg(a.config);
  const Dataset ds = load_dataset(a.data);
  if (ds.spec.num_classes != lc.cfg.num_classes) {
    throw ConfigError("dataset has " + std::to_string(ds.spec.num_classes) + " classes, config expects " +
                      std::to_string(lc.cfg.num_classes));
  }
  claim_dir(a.out, a.force);
  const std::string started = timestamp();

  Model<float> model(lc.cfg, a.seed);
  TrainOptions opt;
  opt.steps = a.steps;
  opt.batch = a.batch;
  opt.lr = a.lr;
  opt.weight_decay = a.weight_decay;
  opt.warmup = a.warmup;
  opt.seed = a.seed;
  opt.augment = !a.no_augment;
  opt.log_every = a.log_every;

  json manifest = {{"command", cmdline},
                   {"config_path", lc.path},
                   {"config_hash", "fnv1a64:" + fnv1a_hex(lc.bytes)},
                   {"seed", a.seed},
                   {"data", a.data},
                   {"options", {{"steps", a.steps}, {"batch", a.batch}, {"lr", a.lr}, {"weight_decay", a.weight_decay},
                                {"warmup", a.warmup}, {"augment", opt.augment}}},
                   {"start", started}};
  write_file((fs::path(a.out) / "config.json").string(), lc.bytes);

  TrainResult res;
  try {
    res = train_model(model, ds.samples, opt, [](const TrainLog& l) {
      std::printf("step %6d  loss %.5f  lr %.3e\n", l.step, l.loss, l.lr);
      std::fflush(stdout);
    });
  } catch (const DivergenceError& e) {
    const std::string diag = (fs::path(a.out) / "diagnostics.json").string();
    write_json(diag, e.diagnostics());
    manifest["end"] = timestamp();
    manifest["status"] = "diverged";
    manifest["diagnostics"] = diag;
    write_json((fs::path(a.out) / "run.json").string(), manifest);
    std::fprintf(stderr, "error: %s (diagnostics in %s)\n", e.what(), diag.c_str());
    return 3;
  }

  const std::string ck = (fs::path(a.out) / "checkpoint").string();
  save_checkpoint(ck, model, {{"steps", a.steps}, {"seed", a.seed}});
  const auto summary = evaluate(predict(model, ds.samples), labels_of(ds.samples), lc.cfg.num_classes,
                                Threshold::pixels(3));
  std::printf("train pixel accuracy %.4f  mIoU %.4f\n", summary.iou.pixel_accuracy, summary.iou.miou.value_or(0));

  manifest["end"] = timestamp();
  manifest["status"] = "ok";
  manifest["seconds"] = res.seconds;
  manifest["checkpoints"] = {ck};
  manifest["metrics"] = {{"final_loss", res.losses.empty() ? json(nullptr) : json(res.losses.back())},
                         {"train_pixel_accuracy", summary.iou.pixel_accuracy},
                         {"train_miou", summary.iou.miou ? json(*summary.iou.miou) : json(nullptr)}};
  write_json((fs::path(a.out) / "run.json").string(), manifest);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::vector<int>& crops, double threshold_px,
             const std::string& out) {
  const Model<float> model = load_model(checkpoint_dir(checkpoint));
  const Dataset ds = load_dataset(data);
  const int classes = model.config().num_classes;
  if (ds.spec.num_classes != classes) {
    throw ConfigError("checkpoint predicts " + std::to_string(classes) + " classes, dataset has " +
                      std::to_string(ds.spec.num_classes));
  }
  const auto preds = predict(model, ds.samples);
  const auto labels = labels_of(ds.samples);
  const Threshold t = threshold_px > 0 ? Threshold::pixels(threshold_px) : Threshold::relative();
  json report = evaluate(preds, labels, classes, t).to_json();
  report["images"] = ds.samples.size();
  report["checkpoint"] = checkpoint;

  // Reported only; no monotonicity is implied.
  json series = json::array();
  for (int c : crops) {
    double miou_sum = 0, f_sum = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      miou_sum += crop_eval(preds[i], labels[i], c, c, [&](const LabelMap& p, const LabelMap& l) {
        return miou(p, l, classes).miou.value_or(1.0);
      });
      f_sum += crop_eval(preds[i], labels[i], c, c, [&](const LabelMap& p, const LabelMap& l) {
        return imagewise_fscore(p, l, t).f;
      });
    }
    const double n = static_cast<double>(preds.size());
    series.push_back({{"crop", c}, {"miou", miou_sum / n}, {"imagewise_fscore", f_sum / n}});
  }
  if (!crops.empty()) report["crop_series"] = series;

  const std::string text = report.dump(2);
  std::printf("%s\n", text.c_str());
  if (!out.empty()) write_file(out, text + "\n");
  return 0;
}

std::vector<std::pair<std::int64_t, std::int64_t>> parse_queries(const std::string& spec) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.empty()) continue;
    const auto comma = item.find(',');
    if (comma == std::string::npos) throw ConfigError("query '" + item + "' is not y,x");
    try {
      out.emplace_back(std::stoll(item.substr(0, comma)), std::stoll(item.substr(comma + 1)));
    } catch (const std::logic_error&) {
      throw ConfigError("query '" + item + "' is not y,x");
    }
  }
  if (out.empty()) throw ConfigError("no queries given");
  return out;
}

int cmd_visualize(const std::string& checkpoint, const std::string& image_path, const std::string& queries,
                  const std::string& out, int source, int levels, double alpha, bool save_masks) {
  const Model<float> model = load_model(checkpoint_dir(checkpoint));
  const Image img = read_ppm(image_path);
  const auto qs = parse_queries(queries);
  if (source < 2 || source > 4) throw ConfigError("--stage must be 2, 3 or 4");
  ForwardOptions fo;
  fo.record_weights = true;
  EncoderOutput<float> enc;
  {
    NoGradGuard guard;
    Tensor<float> x = image_to_tensor(img);
    enc = model.forward_encoder(Var<float>(x.reshaped({1, img.h, img.w, 3})), fo);
  }
  if (levels <= 0) {
    levels = 0;
    while (source - levels > 1 && enc.td_weights[static_cast<std::size_t>(source - levels - 1)]) ++levels;
    if (levels == 0) {
      throw ContractError("stage " + std::to_string(source) + " has no top-down weights; enable HILA there");
    }
  }
  if (source - levels < 1) throw ConfigError("cannot compose " + std::to_string(levels) + " levels below stage " +
                                             std::to_string(source));
  fs::create_directories(out);
  RenderOptions ro;
  ro.alpha = alpha;
  int written = 0;
  for (std::size_t qi = 0; qi < qs.size(); ++qi) {
    const auto [qy, qx] = qs[qi];
    std::vector<PatchGeometry> chain;
    for (int l = 1; l <= levels; ++l) {
      const int target = source - l;
      chain.push_back(model.config().stages[static_cast<std::size_t>(target)].geometry());
      const HierarchyMask m = hierarchy_from_output(enc, source, target, 0);
      char name[96];
      std::snprintf(name, sizeof name, "q%02zu_y%lld_x%lld_s%d_to_s%d", qi, static_cast<long long>(qy),
                    static_cast<long long>(qx), source, target);
      write_ppm((fs::path(out) / (std::string(name) + ".ppm")).string(),
                render_mask(m, qy, qx, img, ro, support_window(qy, qx, chain)));
      if (save_masks) save_hilt((fs::path(out) / (std::string(name) + ".hilt")).string(), m.dense());
      ++written;
    }
  }
  std::printf("wrote %d masks to %s\n", written, out.c_str());
  return 0;
}

int cmd_flops(const std::string& config_path, std::int64_t h, std::int64_t w) {
  const LoadedConfig lc = load_config_arg(config_path);
  if (h <= 0 || w <= 0 || h % 32 != 0 || w % 32 != 0) throw ConfigError("height and width must be positive multiples of 32");
  ModelConfig off = lc.cfg;
  for (auto& s : off.stages) s.hila = false;
  json report = {{"input", {{"height", h}, {"width", w}}},
                 {"config_path", lc.path},
                 {"hila", config_flops(lc.cfg, h, w).to_json()},
                 {"params", Model<float>(lc.cfg, 0).params().count()},
                 {"hila_disabled", {{"interlevel", config_flops(off, h, w).to_json()},
                                    {"params", Model<float>(off, 0).params().count()}}}};
  std::printf("%s\n", report.dump(2).c_str());
  return 0;
}

int cmd_gen_data(const std::string& out, std::int64_t n, const ShapesSpec& spec, bool force) {
  spec.validate();
  claim_dir(out, force);
  save_dataset(out, spec, generate_shapes(spec, n));
  std::printf("wrote %lld samples to %s\n", static_cast<long long>(n), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("HILA_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
  }
  CLI::App app{"Hierarchical inter-level attention: checks, training, evaluation and visualization"};
  app.require_subcommand(1);

  std::string config;
  std::uint64_t seed = 0;

  bool f64 = false;
  auto* check = app.add_subcommand("check", "run the invariant suites and print a pass/fail table");
  check->add_option("--config", config, "model config JSON (default: built-in tiny)");
  check->add_option("--seed", seed);
  check->add_flag("--float64", f64, "strict gradient tolerance (1e-5) for the composed checks");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train on a dataset directory and write a checkpoint");
  train->add_option("--config", ta.config);
  train->add_option("--data", ta.data)->required();
  train->add_option("--out", ta.out)->required();
  train->add_option("--steps", ta.steps)->check(CLI::NonNegativeNumber);
  train->add_option("--lr", ta.lr);
  train->add_option("--weight-decay", ta.weight_decay);
  train->add_option("--warmup", ta.warmup, "linear warmup steps")->check(CLI::NonNegativeNumber);
  train->add_option("--batch", ta.batch)->check(CLI::PositiveNumber);
  train->add_option("--seed", ta.seed);
  train->add_option("--log-every", ta.log_every);
  train->add_flag("--no-augment", ta.no_augment);
  train->add_flag("--force", ta.force, "replace an existing output directory");

  std::string ck, data, out;
  std::vector<int> crops;
  double threshold = 3;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset directory (JSON)");
  eval->add_option("--checkpoint", ck)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--crop-sizes", crops, "center crop sides for the distance series")->delimiter(',');
  eval->add_option("--threshold-px", threshold, "boundary tolerance in pixels; 0 selects the relative rule");
  eval->add_option("--out", out, "also write the report here");

  std::string image, queries;
  int stage = 4, levels = 0;
  double alpha = 0.6;
  bool save_masks = false;
  auto* vis = app.add_subcommand("visualize", "render composed top-down masks for query locations");
  vis->add_option("--checkpoint", ck)->required();
  vis->add_option("--image", image)->required();
  vis->add_option("--queries", queries, "y,x;y,x on the source stage grid")->required();
  vis->add_option("--out", out)->required();
  vis->add_option("--stage", stage, "source stage");
  vis->add_option("--levels", levels, "levels to compose (default: all available)");
  vis->add_option("--alpha", alpha);
  vis->add_flag("--save-masks", save_masks, "also write dense masks as HILT tensors");

  std::int64_t height = 64, width = 64;
  auto* flops = app.add_subcommand("flops", "closed-form inter-level cost report (JSON)");
  flops->add_option("--config", config);
  flops->add_option("--height", height);
  flops->add_option("--width", width);

  ShapesSpec spec;
  std::int64_t count = 256;
  bool force = false;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic shapes dataset");
  gen->add_option("--out", out)->required();
  gen->add_option("--n", count)->check(CLI::PositiveNumber);
  gen->add_option("--seed", spec.seed);
  gen->add_option("--image-size", spec.image_size);
  gen->add_option("--num-classes", spec.num_classes);
  gen->add_option("--noise", spec.noise_std);
  gen->add_flag("--force", force);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*check) return cmd_check(config, seed, f64);
    if (*train) return cmd_train(ta, command_line(argc, argv));
    if (*eval) return cmd_eval(ck, data, crops, threshold, out);
    if (*vis) return cmd_visualize(ck, image, queries, out, stage, levels, alpha, save_masks);
    if (*flops) return cmd_flops(config, height, width);
    if (*gen) return cmd_gen_data(out, count, spec, force);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
