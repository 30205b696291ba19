#include "attentropy/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "attentropy/error.hpp"
#include "attentropy/eval.hpp"
#include "attentropy/json_io.hpp"
#include "attentropy/layer_selection.hpp"

namespace attentropy::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr double kVizClipMin = 0.0;
constexpr double kVizClipMax = 0.005;

enum class LogLevel { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

class Log {
 public:
  explicit Log(std::ostream& err) : err_(err) {
    if (const char* env = std::getenv("ATTENTROPY_LOG")) {
      const std::string v = env;
      if (v == "error") level_ = LogLevel::kError;
      else if (v == "info") level_ = LogLevel::kInfo;
      else if (v == "debug") level_ = LogLevel::kDebug;
    }
  }
  void warn(const std::string& msg) const { emit(LogLevel::kWarn, "warning", msg); }
  void info(const std::string& msg) const { emit(LogLevel::kInfo, "info", msg); }
  void debug(const std::string& msg) const { emit(LogLevel::kDebug, "debug", msg); }

 private:
  void emit(LogLevel lvl, const char* tag, const std::string& msg) const {
    if (static_cast<int>(lvl) <= static_cast<int>(level_))
      err_ << "[" << tag << "] " << msg << "\n";
  }
  std::ostream& err_;
  LogLevel level_ = LogLevel::kWarn;
};

std::string numbered(const char* prefix, std::size_t l, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%02zu%s", prefix, l, suffix);
  return buf;
}

// Optional defaults shared by the pipeline commands; explicit flags win.
struct PipelineConfig {
  std::optional<std::string> model;
  std::optional<std::string> aggregation;
  std::optional<std::vector<std::size_t>> layers;
  std::optional<std::size_t> common_grid;
  std::optional<double> threshold;
  std::optional<std::size_t> window;
  std::optional<std::size_t> stride;
  std::optional<bool> renormalize;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
};

template <typename T>
void read_opt(const json& j, const char* key, std::optional<T>& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  const json j = read_json(path);
  if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
  static const std::vector<std::string> kKnown = {
      "model",  "aggregation", "layers", "common_grid", "threshold", "window",
      "stride", "renormalize", "seed",   "threads"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(kKnown.begin(), kKnown.end(), it.key()) == kKnown.end())
      throw ConfigError("pipeline config has unknown key " + it.key());
  PipelineConfig c;
  try {
    read_opt(j, "model", c.model);
    read_opt(j, "aggregation", c.aggregation);
    read_opt(j, "layers", c.layers);
    read_opt(j, "common_grid", c.common_grid);
    read_opt(j, "threshold", c.threshold);
    read_opt(j, "window", c.window);
    read_opt(j, "stride", c.stride);
    read_opt(j, "renormalize", c.renormalize);
    read_opt(j, "seed", c.seed);
    read_opt(j, "threads", c.threads);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pipeline config: ") + e.what());
  }
  return c;
}

template <typename T>
void apply_default(const CLI::Option* opt, T& value, const std::optional<T>& from_config) {
  if (opt->count() == 0 && from_config) value = *from_config;
}

void write_f32_raw(std::span<const double> values, const fs::path& path) {
  std::vector<std::uint8_t> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float f = static_cast<float>(values[i]);
    std::uint32_t raw;
    std::memcpy(&raw, &f, 4);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<std::uint8_t>(raw >> (8 * b));
  }
  write_file(path, bytes);
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "n/a"; }

// Shared state for one invocation.
struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  unsigned threads = 1;
  std::string out;
  PipelineConfig pipeline;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

void require_out(const Globals& g) {
  if (g.out.empty()) throw ConfigError("--out is required");
}

LayerAggregation resolve_aggregation(const std::string& agg_path,
                                     const std::vector<std::size_t>& layers,
                                     std::size_t layer_count) {
  if (!agg_path.empty() && !layers.empty())
    throw ConfigError("--aggregation and --layers are mutually exclusive");
  if (!layers.empty()) return LayerAggregation::uniform(layers);
  if (!agg_path.empty()) {
    const json j = read_json(agg_path);
    // Selection reports wrap the aggregation; weight files carry it at top level.
    return aggregation_from_json(j.contains("aggregation") ? j.at("aggregation") : j);
  }
  return LayerAggregation::all_layers(layer_count);
}

}  // namespace

EntropyBundle extract_entropy(const GrayImage& image, const LoadedModel& model,
                              const SlidingOptions& options,
                              AttentionStack* single_pass_stack) {
  const auto& cfg = model.config;
  const std::size_t p = cfg.patch_size;
  const std::size_t input = cfg.image_size();
  if (image.width % p != 0 || image.height % p != 0)
    throw ConfigError("image " + std::to_string(image.width) + "x" +
                      std::to_string(image.height) + " is not a multiple of patch size " +
                      std::to_string(p));
  const std::size_t window = options.window ? options.window : input;
  if (window != input)
    throw ConfigError("window must equal the model input size " + std::to_string(input));
  std::size_t stride = options.stride ? options.stride : std::max(p, (window / 2) / p * p);
  if (stride % p != 0) throw ConfigError("stride must be a multiple of the patch size");

  EntropyBundle bundle;
  bundle.image_width = image.width;
  bundle.image_height = image.height;
  bundle.has_class_token = cfg.use_class_token;
  bundle.renormalize = options.extract.renormalize;

  if (image.width == input && image.height == input) {
    auto stack = vit_forward(image, model.weights, cfg, options.extract.threads);
    bundle.maps = layer_entropy_maps(stack, options.extract);
    if (single_pass_stack) *single_pass_stack = std::move(stack);
    return bundle;
  }
  if (single_pass_stack)
    throw ConfigError("attention dumps need a single-window frame");

  const auto xs = window_origins(image.width, window, stride);
  const auto ys = window_origins(image.height, window, stride);
  std::vector<std::vector<Window<EntropyTag>>> per_layer(cfg.layers);
  for (auto oy : ys) {
    for (auto ox : xs) {
      GrayImage crop(window, window);
      for (std::size_t y = 0; y < window; ++y)
        for (std::size_t x = 0; x < window; ++x) crop.at(x, y) = image.at(ox + x, oy + y);
      const auto stack = vit_forward(crop, model.weights, cfg, options.extract.threads);
      auto maps = layer_entropy_maps(stack, options.extract);
      for (std::size_t l = 0; l < maps.size(); ++l)
        per_layer[l].push_back({std::move(maps[l]), ox / p, oy / p});
    }
  }
  bundle.windows = xs.size() * ys.size();
  for (const auto& windows : per_layer)
    bundle.maps.push_back(merge_windows<EntropyTag>(windows, image.width / p,
                                                    image.height / p));
  return bundle;
}

void save_entropy_bundle(const EntropyBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir);
  json layers = json::array();
  for (std::size_t l = 0; l < bundle.maps.size(); ++l) {
    const auto& m = bundle.maps[l];
    const std::string file = numbered("entropy_layer", l, ".npy");
    save_tensor(Tensor::from_doubles({m.height(), m.width()}, m.values()), dir / file);
    layers.push_back({{"file", file}, {"grid_w", m.width()}, {"grid_h", m.height()}});
  }
  write_json({{"format", "attentropy-entropy"},
              {"image_width", bundle.image_width},
              {"image_height", bundle.image_height},
              {"windows", bundle.windows},
              {"has_class_token", bundle.has_class_token},
              {"renormalize", bundle.renormalize},
              {"layers", std::move(layers)}},
             dir / "manifest.json");
}

EntropyBundle load_entropy_bundle(const fs::path& dir) {
  const json j = read_json(dir / "manifest.json");
  EntropyBundle bundle;
  try {
    bundle.image_width = j.at("image_width").get<std::size_t>();
    bundle.image_height = j.at("image_height").get<std::size_t>();
    bundle.windows = j.value("windows", std::size_t{1});
    bundle.has_class_token = j.value("has_class_token", false);
    bundle.renormalize = j.value("renormalize", true);
    for (const auto& entry : j.at("layers")) {
      const Tensor t = load_tensor(dir / entry.at("file").get<std::string>());
      if (t.ndim() != 2) throw ShapeError("entropy map must be 2-D");
      bundle.maps.emplace_back(t.shape()[1], t.shape()[0], t.to_doubles());
    }
  } catch (const json::exception& e) {
    throw ConfigError("entropy manifest: " + std::string(e.what()));
  }
  if (bundle.maps.empty()) throw ConfigError("entropy manifest lists no layers");
  return bundle;
}

ScoreMap score_frame(const EntropyBundle& bundle, const LayerAggregation& agg,
                     std::optional<std::size_t> common_grid) {
  auto [w, h] = finest_grid(bundle.maps);
  if (common_grid) w = h = *common_grid;
  const EntropyMap combined = aggregate_layers(bundle.maps, agg, w, h);
  return to_score(combined, bundle.image_width, bundle.image_height,
                  agg.mode == LayerAggregation::Mode::kWeighted);
}

namespace {

// ---------------------------------------------------------------------------
// Subcommands

struct InitModelArgs {
  std::size_t layers = 4, heads = 2, channels = 16, grid = 8, patch = 16;
  bool class_token = false, zero_qk = false;
};

int cmd_init_model(const InitModelArgs& a, const Globals& g, CLI::App* sub,
                   std::ostream& out) {
  require_out(g);
  VitConfig config;
  if (!g.config.empty()) {
    config = load_config(g.config);
  }
  auto flag = [&](const char* name) { return sub->get_option(name)->count() > 0; };
  if (g.config.empty() || flag("--layers")) config.layers = a.layers;
  if (g.config.empty() || flag("--heads")) config.heads = a.heads;
  if (g.config.empty() || flag("--channels")) config.channels = a.channels;
  if (g.config.empty() || flag("--grid")) config.grid_n = a.grid;
  if (g.config.empty() || flag("--patch")) config.patch_size = a.patch;
  if (g.config.empty() || flag("--class-token")) config.use_class_token = a.class_token;
  config.validate();
  const auto weights = init_model(config, g.seed, {a.zero_qk});
  save_model(config, weights, g.seed, g.out);
  out << "model: " << config.layers << " layers, " << config.heads << " heads, C="
      << config.channels << ", grid " << config.grid_n << "x" << config.grid_n
      << ", T=" << config.token_count() << " -> " << g.out << "\n";
  return kOk;
}

struct PatternArgs {
  std::size_t width = 256, height = 256, patch = 16;
  double cx = -1, cy = -1, radius = -1;
};

int cmd_gen_testpattern(const PatternArgs& a, const Globals& g, std::ostream& out) {
  require_out(g);
  PatternSpec spec;
  spec.width = a.width;
  spec.height = a.height;
  spec.patch_size = a.patch;
  spec.cx = a.cx >= 0 ? a.cx : static_cast<double>(a.width) / 2.0;
  spec.cy = a.cy >= 0 ? a.cy : static_cast<double>(a.height) / 2.0;
  spec.radius = a.radius >= 0
                    ? a.radius
                    : std::max(static_cast<double>(a.patch),
                               static_cast<double>(std::min(a.width, a.height)) / 4.0);
  spec.seed = g.seed;
  const auto pattern = gen_test_pattern(spec);
  fs::create_directories(g.out);
  save_image(pattern.image, fs::path(g.out) / "image.pgm");
  save_mask(pattern.object_mask, fs::path(g.out) / "mask.pgm");
  write_json({{"width", spec.width},
              {"height", spec.height},
              {"cx", spec.cx},
              {"cy", spec.cy},
              {"radius", spec.radius},
              {"patch_size", spec.patch_size},
              {"seed", spec.seed}},
             fs::path(g.out) / "pattern.json");
  out << "test pattern " << spec.width << "x" << spec.height << " -> " << g.out << "\n";
  return kOk;
}

struct ExtractArgs {
  std::string image, model, attention;
  std::size_t window = 0, stride = 0, patch = 16;
  bool dump_attention = false, no_renormalize = false;
};

int cmd_extract(ExtractArgs a, const Globals& g, CLI::App* sub, std::ostream& out,
                const Log& log) {
  require_out(g);
  apply_default(sub->get_option("--model"), a.model, g.pipeline.model);
  apply_default(sub->get_option("--window"), a.window, g.pipeline.window);
  apply_default(sub->get_option("--stride"), a.stride, g.pipeline.stride);
  bool renormalize = !a.no_renormalize;
  if (sub->get_option("--no-renormalize")->count() == 0 && g.pipeline.renormalize)
    renormalize = *g.pipeline.renormalize;

  ExtractOptions extract{renormalize, g.threads};
  EntropyBundle bundle;
  AttentionStack stack;
  if (!a.attention.empty()) {
    if (!a.image.empty() || !a.model.empty())
      throw ConfigError("--attention excludes --image/--model");
    stack = load_attention(a.attention);
    bundle.maps = layer_entropy_maps(stack, extract);
    std::size_t finest = 0;
    for (const auto& l : stack.layers) finest = std::max(finest, l.grid_n);
    bundle.image_width = bundle.image_height = finest * a.patch;
    bundle.has_class_token = stack.has_class_token;
    bundle.renormalize = renormalize;
  } else {
    if (a.image.empty() || a.model.empty())
      throw ConfigError("extract needs --image and --model (or --attention)");
    const auto model = load_model(a.model);
    const auto image = load_image(a.image);
    bundle = extract_entropy(image, model, {a.window, a.stride, extract},
                             a.dump_attention ? &stack : nullptr);
  }
  save_entropy_bundle(bundle, g.out);
  if (a.dump_attention) save_attention(stack, fs::path(g.out) / "attention");
  log.info("extracted " + std::to_string(bundle.maps.size()) + " layers over " +
           std::to_string(bundle.windows) + " window(s)");
  out << "layer  grid    mean_entropy\n";
  for (std::size_t l = 0; l < bundle.maps.size(); ++l) {
    const auto& m = bundle.maps[l];
    double sum = 0.0;
    for (double v : m.values()) sum += v;
    out << std::setw(5) << l << "  " << m.width() << "x" << m.height() << "  "
        << fmt(sum / static_cast<double>(m.values().size())) << "\n";
  }
  return kOk;
}

struct SelectArgs {
  std::string model, pattern, attention, mask;
  double ratio = 1.2;
};

int cmd_select_layers(SelectArgs a, const Globals& g, CLI::App* sub, std::ostream& out,
                      const Log& log) {
  require_out(g);
  apply_default(sub->get_option("--model"), a.model, g.pipeline.model);
  ExtractOptions extract{g.pipeline.renormalize.value_or(true), g.threads};
  SelectionReport report;
  if (!a.attention.empty()) {
    if (a.mask.empty()) throw ConfigError("--attention needs --mask");
    report = select_from_stack(load_attention(a.attention), load_mask(a.mask), a.ratio,
                               extract);
  } else {
    if (a.model.empty()) throw ConfigError("select-layers needs --model or --attention");
    const auto model = load_model(a.model);
    if (!a.pattern.empty()) {
      const auto image = load_image(fs::path(a.pattern) / "image.pgm");
      const auto mask = load_mask(fs::path(a.pattern) / "mask.pgm");
      const auto stack = vit_forward(image, model.weights, model.config, g.threads);
      report = select_from_stack(stack, mask, a.ratio, extract);
    } else {
      report = auto_select(model.weights, model.config, {a.ratio, g.seed, extract});
    }
  }
  if (report.fallback_used)
    log.warn("no layer passed the ratio test; falling back to all layers");
  const fs::path path(g.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_json(selection_to_json(report), path);
  out << "layer  obj_mean  bg_mean   ratio   selected\n";
  for (std::size_t l = 0; l < report.stats.size(); ++l) {
    const auto& s = report.stats[l];
    const bool sel = std::find(report.selected.begin(), report.selected.end(), l) !=
                     report.selected.end();
    out << std::setw(5) << l << "  " << fmt(s.obj_mean) << "    " << fmt(s.bg_mean)
        << "    " << (s.obj_mean > 0 ? fmt(s.bg_mean / s.obj_mean, 3) : "inf") << "   "
        << (sel ? "yes" : "no") << "\n";
  }
  if (report.fallback_used) out << "fallback: all layers\n";
  return kOk;
}

struct FitArgs {
  std::vector<std::string> entropy, masks;
  std::size_t epochs = 500;
  double lr = 0.1, l2 = 1e-4;
};

int cmd_fit_weights(const FitArgs& a, const Globals& g, std::ostream& out) {
  require_out(g);
  if (a.entropy.empty()) throw ConfigError("fit-weights needs at least one --entropy frame");
  if (a.entropy.size() != a.masks.size())
    throw ConfigError("each --entropy directory needs a matching --mask");
  std::vector<double> features;
  std::vector<std::uint8_t> labels;
  std::size_t layer_count = 0;
  for (std::size_t f = 0; f < a.entropy.size(); ++f) {
    const auto bundle = load_entropy_bundle(a.entropy[f]);
    const auto mask = load_mask(a.masks[f]);
    if (f == 0) layer_count = bundle.maps.size();
    if (bundle.maps.size() != layer_count)
      throw ConfigError("frames disagree in layer count");
    std::vector<EntropyMap> resampled;
    for (const auto& m : bundle.maps)
      resampled.push_back(resample_bilinear(m, mask.width(), mask.height()));
    for (std::size_t i = 0; i < mask.values().size(); ++i) {
      const auto y = mask.values()[i];
      if (y == BinaryMask::kIgnore) continue;
      for (const auto& m : resampled) features.push_back(m.values()[i]);
      labels.push_back(y);
    }
  }
  const Matrix x(labels.size(), layer_count, std::move(features));
  const auto fit = fit_layer_weights(x, labels, {a.epochs, a.lr, a.l2});

  std::vector<double> scores(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double z = fit.bias;
    for (std::size_t k = 0; k < layer_count; ++k) z += fit.weights[k] * x(i, k);
    scores[i] = sigmoid(z);
  }
  const double train_ap = average_precision(pr_curve(scores, labels));

  const fs::path path(g.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_json({{"mode", "weighted"},
              {"weights", fit.weights},
              {"bias", fit.bias},
              {"epochs", a.epochs},
              {"lr", a.lr},
              {"l2", a.l2},
              {"samples", labels.size()},
              {"train_ap", train_ap},
              {"loss_trace", fit.loss_trace}},
             path);
  out << "fitted " << layer_count << " layer weights on " << labels.size()
      << " pixels; loss " << fmt(fit.loss_trace.front()) << " -> "
      << fmt(fit.loss_trace.back()) << ", training AP " << fmt(train_ap) << "\n";
  return kOk;
}

struct SegmentArgs {
  std::string image, model, entropy, aggregation;
  std::vector<std::size_t> layers;
  std::size_t common_grid = 0, window = 0, stride = 0;
  double threshold = 0.0;
  bool no_renormalize = false;
};

int cmd_segment(SegmentArgs a, const Globals& g, CLI::App* sub, std::ostream& out) {
  require_out(g);
  apply_default(sub->get_option("--model"), a.model, g.pipeline.model);
  apply_default(sub->get_option("--aggregation"), a.aggregation, g.pipeline.aggregation);
  apply_default(sub->get_option("--layers"), a.layers, g.pipeline.layers);
  apply_default(sub->get_option("--common-grid"), a.common_grid, g.pipeline.common_grid);
  apply_default(sub->get_option("--window"), a.window, g.pipeline.window);
  apply_default(sub->get_option("--stride"), a.stride, g.pipeline.stride);
  const bool threshold_given =
      sub->get_option("--threshold")->count() > 0 || g.pipeline.threshold.has_value();
  apply_default(sub->get_option("--threshold"), a.threshold, g.pipeline.threshold);
  bool renormalize = !a.no_renormalize;
  if (sub->get_option("--no-renormalize")->count() == 0 && g.pipeline.renormalize)
    renormalize = *g.pipeline.renormalize;

  EntropyBundle bundle;
  if (!a.entropy.empty()) {
    if (!a.image.empty()) throw ConfigError("--entropy excludes --image");
    bundle = load_entropy_bundle(a.entropy);
  } else {
    if (a.image.empty() || a.model.empty())
      throw ConfigError("segment needs --image and --model (or --entropy)");
    bundle = extract_entropy(load_image(a.image), load_model(a.model),
                             {a.window, a.stride, {renormalize, g.threads}});
  }
  const auto agg = resolve_aggregation(a.aggregation, a.layers, bundle.maps.size());
  const auto scores = score_frame(
      bundle, agg, a.common_grid ? std::optional<std::size_t>(a.common_grid) : std::nullopt);
  double threshold = a.threshold;
  if (!threshold_given) {
    const auto [lo, hi] = std::minmax_element(scores.values().begin(), scores.values().end());
    threshold = 0.5 * (*lo + *hi);
  }
  const auto mask = binarize(scores, threshold);

  const fs::path dir(g.out);
  fs::create_directories(dir);
  save_tensor(Tensor::from_doubles({scores.height(), scores.width()}, scores.values()),
              dir / "score.npy");
  save_mask(mask, dir / "mask.pgm");
  const auto object_pixels =
      std::count(mask.values().begin(), mask.values().end(), BinaryMask::kObject);
  write_json({{"threshold", threshold},
              {"threshold_source", threshold_given ? "argument" : "score midpoint"},
              {"aggregation", aggregation_to_json(agg)},
              {"width", scores.width()},
              {"height", scores.height()},
              {"object_pixels", object_pixels}},
             dir / "segment.json");
  out << "segmented " << scores.width() << "x" << scores.height() << " at threshold "
      << fmt(threshold) << ": " << object_pixels << " object pixels\n";
  return kOk;
}

struct EvaluateArgs {
  std::string scores, gt, csv, normalization = "minmax";
  std::vector<double> thresholds;
  double tau = 0.5;
};

int cmd_evaluate(const EvaluateArgs& a, const Globals& g, std::ostream& out) {
  require_out(g);
  std::map<std::string, fs::path> score_files, gt_files;
  for (const auto& e : fs::directory_iterator(a.scores))
    if (e.path().extension() == ".npy") score_files[e.path().stem().string()] = e.path();
  for (const auto& e : fs::directory_iterator(a.gt))
    if (e.path().extension() == ".pgm") gt_files[e.path().stem().string()] = e.path();
  for (const auto& [stem, _] : score_files)
    if (!gt_files.count(stem)) throw IoError("score file " + stem + ".npy has no ground truth");
  for (const auto& [stem, _] : gt_files)
    if (!score_files.count(stem)) throw IoError("ground truth " + stem + ".pgm has no scores");

  std::vector<EvalFrame> frames;
  for (const auto& [stem, path] : score_files) {
    const Tensor t = load_tensor(path);
    if (t.ndim() != 2) throw ShapeError(path.string() + ": score map must be 2-D");
    frames.push_back({ScoreMap(t.shape()[1], t.shape()[0], t.to_doubles()),
                      load_mask(gt_files.at(stem))});
  }
  EvalOptions options;
  if (!a.thresholds.empty()) options.thresholds = a.thresholds;
  options.tau_match = a.tau;
  if (a.normalization == "none") options.normalization = ScoreNormalization::kNone;
  else if (a.normalization != "minmax")
    throw ConfigError("--normalization must be minmax or none");

  const auto report = evaluate(frames, options);
  const fs::path path(g.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_json(report_to_json(report), path);
  if (!a.csv.empty())
    write_file(a.csv, [&] {
      const std::string text = report_csv_header() + "\n" + report_csv_row(report) + "\n";
      return std::vector<std::uint8_t>(text.begin(), text.end());
    }());
  out << "frames " << report.frames << "\n"
      << "AP       " << fmt(report.ap) << "\n"
      << "FPR@95   " << fmt(report.fpr95) << "\n"
      << "sIoU     " << fmt(report.siou_bar) << "\n"
      << "PPV      " << fmt(report.ppv_bar) << "\n"
      << "mean F1  " << fmt(report.f1_bar) << "\n";
  return kOk;
}

struct VizArgs {
  std::string image, attention, bundle;
  bool no_renormalize = false;
};

int cmd_export_viz(const VizArgs& a, const Globals& g, std::ostream& out) {
  require_out(g);
  if (!fs::exists(fs::path(a.attention) / "manifest.json"))
    throw IoError("missing attention dumps in " + a.attention);
  const auto stack = load_attention(a.attention);
  const auto image = load_image(a.image);
  if (stack.layers.empty()) throw IoError("attention dump has no layers");
  const std::size_t grid = stack.layers[0].grid_n;
  for (const auto& l : stack.layers)
    if (l.grid_n != grid || l.reduction_r != 1)
      throw ConfigError("viz bundles need full attention on one grid");

  const fs::path dir(g.out);
  fs::create_directories(dir);
  const bool renormalize = !a.no_renormalize;
  json attention_files = json::array(), entropy_files = json::array();
  const auto maps = layer_entropy_maps(stack, {renormalize, g.threads});
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    Matrix mean = average_heads(stack.layers[l].heads);
    if (stack.has_class_token) mean = strip_class_token(mean, renormalize);
    const std::string att = numbered("attention_layer", l, ".f32");
    const std::string ent = numbered("entropy_layer", l, ".f32");
    write_f32_raw(mean.data(), dir / att);
    write_f32_raw(maps[l].values(), dir / ent);
    attention_files.push_back(att);
    entropy_files.push_back(ent);
  }
  save_image(image, dir / "image.pgm");
  write_json({{"format", "attentropy-viz"},
              {"grid_n", grid},
              {"token_count", grid * grid},
              {"layers", stack.layers.size()},
              {"clip", {kVizClipMin, kVizClipMax}},
              {"image", "image.pgm"},
              {"image_width", image.width},
              {"image_height", image.height},
              {"dtype", "float32-le"},
              {"attention", std::move(attention_files)},
              {"entropy", std::move(entropy_files)}},
             dir / "manifest.json");
  out << "viz bundle: " << stack.layers.size() << " layers, grid " << grid << "x" << grid
      << " -> " << g.out << "\n";
  return kOk;
}

int cmd_validate_viz(const VizArgs& a, std::ostream& out) {
  const fs::path dir(a.bundle);
  const json m = read_json(dir / "manifest.json");
  try {
    const auto grid = m.at("grid_n").get<std::size_t>();
    const auto layers = m.at("layers").get<std::size_t>();
    const auto tokens = m.at("token_count").get<std::size_t>();
    const auto clip = m.at("clip").get<std::vector<double>>();
    if (tokens != grid * grid) throw FormatError(FormatError::Kind::kMalformedHeader, "token_count", "token_count != grid_n^2");
    if (clip.size() != 2 || !(clip[0] < clip[1]))
      throw FormatError(FormatError::Kind::kMalformedHeader, "clip", "clip must be [min, max] with min < max");
    const auto att = m.at("attention").get<std::vector<std::string>>();
    const auto ent = m.at("entropy").get<std::vector<std::string>>();
    if (att.size() != layers || ent.size() != layers)
      throw FormatError(FormatError::Kind::kMalformedHeader, "layers", "file lists disagree with layer count");
    for (std::size_t l = 0; l < layers; ++l) {
      const auto abytes = fs::file_size(dir / att[l]);
      const auto ebytes = fs::file_size(dir / ent[l]);
      if (abytes != tokens * tokens * 4)
        throw FormatError(FormatError::Kind::kTruncatedPayload, att[l],
                          att[l] + " has " + std::to_string(abytes) + " bytes, expected " +
                              std::to_string(tokens * tokens * 4));
      if (ebytes != tokens * 4)
        throw FormatError(FormatError::Kind::kTruncatedPayload, ent[l],
                          ent[l] + " has " + std::to_string(ebytes) + " bytes, expected " +
                              std::to_string(tokens * 4));
    }
    const auto image = load_image(dir / m.at("image").get<std::string>());
    out << "ok: " << layers << " layers, grid " << grid << "x" << grid << ", image "
        << image.width << "x" << image.height << ", clip [" << clip[0] << ", " << clip[1]
        << "]\n";
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::kMalformedHeader, "manifest",
                      std::string("viz manifest: ") + e.what());
  } catch (const fs::filesystem_error& e) {
    throw IoError(e.what());
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-entropy object segmentation toolkit", "attentropy"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  g.seed_opt = app.add_option("--seed", g.seed, "Seed for every random draw");
  app.add_option("--config", g.config,
                 "JSON config: model config for init-model, pipeline defaults otherwise");
  g.threads_opt = app.add_option("--threads", g.threads, "Worker threads")
                      ->check(CLI::Range(1u, 256u));
  app.add_option("-o,--out", g.out, "Output path (file or directory per command)");

  InitModelArgs init;
  auto* init_cmd = app.add_subcommand("init-model", "Create a seeded toy ViT");
  init_cmd->add_option("--layers", init.layers);
  init_cmd->add_option("--heads", init.heads);
  init_cmd->add_option("--channels", init.channels);
  init_cmd->add_option("--grid", init.grid, "Patches per side");
  init_cmd->add_option("--patch", init.patch, "Patch size in pixels");
  init_cmd->add_flag("--class-token", init.class_token);
  init_cmd->add_flag("--zero-qk", init.zero_qk, "Zero query/key weights (uniform attention)");

  PatternArgs pattern;
  auto* pattern_cmd = app.add_subcommand("gen-testpattern", "Render the circle test pattern");
  pattern_cmd->add_option("--width", pattern.width);
  pattern_cmd->add_option("--height", pattern.height);
  pattern_cmd->add_option("--cx", pattern.cx);
  pattern_cmd->add_option("--cy", pattern.cy);
  pattern_cmd->add_option("--radius", pattern.radius);
  pattern_cmd->add_option("--patch", pattern.patch);

  ExtractArgs extract;
  auto* extract_cmd = app.add_subcommand("extract", "Per-layer attention entropy maps");
  extract_cmd->add_option("--image", extract.image, "PGM image");
  extract_cmd->add_option("--model", extract.model, "Model directory");
  extract_cmd->add_option("--attention", extract.attention, "Attention dump directory");
  extract_cmd->add_option("--window", extract.window);
  extract_cmd->add_option("--stride", extract.stride);
  extract_cmd->add_option("--patch", extract.patch, "Patch size for --attention input");
  extract_cmd->add_flag("--dump-attention", extract.dump_attention);
  extract_cmd->add_flag("--no-renormalize", extract.no_renormalize,
                        "Keep rows unnormalised after dropping the class token");

  SelectArgs select;
  auto* select_cmd = app.add_subcommand("select-layers", "Automatic layer subset selection");
  select_cmd->add_option("--model", select.model);
  select_cmd->add_option("--pattern", select.pattern, "Directory with image.pgm and mask.pgm");
  select_cmd->add_option("--attention", select.attention);
  select_cmd->add_option("--mask", select.mask);
  select_cmd->add_option("--ratio", select.ratio)->check(CLI::PositiveNumber);

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit-weights", "Logistic-regression layer weights");
  fit_cmd->add_option("--entropy", fit.entropy, "Entropy directory (repeatable)");
  fit_cmd->add_option("--mask", fit.masks, "Ground-truth mask (repeatable)");
  fit_cmd->add_option("--epochs", fit.epochs);
  fit_cmd->add_option("--lr", fit.lr);
  fit_cmd->add_option("--l2", fit.l2);

  SegmentArgs segment;
  auto* segment_cmd = app.add_subcommand("segment", "Score map and binary mask");
  segment_cmd->add_option("--image", segment.image);
  segment_cmd->add_option("--model", segment.model);
  segment_cmd->add_option("--entropy", segment.entropy);
  segment_cmd->add_option("--aggregation", segment.aggregation,
                          "Aggregation, selection report or weights JSON");
  segment_cmd->add_option("--layers", segment.layers, "Manual layer subset")->delimiter(',');
  segment_cmd->add_option("--common-grid", segment.common_grid);
  segment_cmd->add_option("--threshold", segment.threshold);
  segment_cmd->add_option("--window", segment.window);
  segment_cmd->add_option("--stride", segment.stride);
  segment_cmd->add_flag("--no-renormalize", segment.no_renormalize);

  EvaluateArgs evaluate_args;
  auto* eval_cmd = app.add_subcommand("evaluate", "Pixel and segment metrics");
  eval_cmd->add_option("--scores", evaluate_args.scores)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--gt", evaluate_args.gt)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--csv", evaluate_args.csv);
  eval_cmd->add_option("--thresholds", evaluate_args.thresholds)->delimiter(',');
  eval_cmd->add_option("--tau", evaluate_args.tau);
  eval_cmd->add_option("--normalization", evaluate_args.normalization);

  VizArgs viz;
  auto* viz_cmd = app.add_subcommand("export-viz", "Bundle for the attention viewer");
  viz_cmd->add_option("--image", viz.image)->required();
  viz_cmd->add_option("--attention", viz.attention)->required();
  viz_cmd->add_flag("--no-renormalize", viz.no_renormalize);

  VizArgs validate;
  auto* validate_cmd = app.add_subcommand("validate-viz", "Check a viz bundle");
  validate_cmd->add_option("--bundle", validate.bundle)->required();

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsageError;
  }

  const Log log(err);
  try {
    if (!g.config.empty() && !init_cmd->parsed()) {
      g.pipeline = load_pipeline_config(g.config);
      apply_default(g.seed_opt, g.seed, g.pipeline.seed);
      apply_default(g.threads_opt, g.threads, g.pipeline.threads);
    }
    if (init_cmd->parsed()) return cmd_init_model(init, g, init_cmd, out);
    if (pattern_cmd->parsed()) return cmd_gen_testpattern(pattern, g, out);
    if (extract_cmd->parsed()) return cmd_extract(extract, g, extract_cmd, out, log);
    if (select_cmd->parsed()) return cmd_select_layers(select, g, select_cmd, out, log);
    if (fit_cmd->parsed()) return cmd_fit_weights(fit, g, out);
    if (segment_cmd->parsed()) return cmd_segment(segment, g, segment_cmd, out);
    if (eval_cmd->parsed()) return cmd_evaluate(evaluate_args, g, out);
    if (viz_cmd->parsed()) return cmd_export_viz(viz, g, out);
    if (validate_cmd->parsed()) return cmd_validate_viz(validate, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}

}  // namespace attentropy::cli
