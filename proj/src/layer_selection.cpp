#include "attentropy/layer_selection.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "attentropy/error.hpp"

namespace attentropy {

TestPattern gen_test_pattern(const PatternSpec& spec) {
  if (spec.width == 0 || spec.height == 0) throw ConfigError("empty test pattern");
  if (spec.radius < static_cast<double>(spec.patch_size))
    throw ConfigError("circle radius must be at least one patch");
  if (spec.cx - spec.radius < 0.0 || spec.cy - spec.radius < 0.0 ||
      spec.cx + spec.radius > static_cast<double>(spec.width) ||
      spec.cy + spec.radius > static_cast<double>(spec.height))
    throw ConfigError("circle out of bounds");

  std::mt19937_64 rng(spec.seed);
  TestPattern pattern{GrayImage(spec.width, spec.height),
                      BinaryMask(spec.width, spec.height)};
  const std::size_t cell = std::max<std::size_t>(1, spec.patch_size / 2);
  const std::size_t stripe = std::max<std::size_t>(1, spec.patch_size / 8);
  const double r2 = spec.radius * spec.radius;
  for (std::size_t y = 0; y < spec.height; ++y) {
    for (std::size_t x = 0; x < spec.width; ++x) {
      // Noise is drawn for every pixel so the background does not depend on
      // where the circle sits.
      const int noise = static_cast<int>(rng() % 41) - 20;
      const double dx = static_cast<double>(x) + 0.5 - spec.cx;
      const double dy = static_cast<double>(y) + 0.5 - spec.cy;
      int value;
      if (dx * dx + dy * dy <= r2) {
        value = (y / stripe) % 2 == 0 ? 235 : 20;
        pattern.object_mask.set(x, y, BinaryMask::kObject);
      } else {
        const bool dark = ((x / cell) + (y / cell)) % 2 == 0;
        value = (dark ? 100 : 150) + noise;
      }
      pattern.image.at(x, y) = static_cast<std::uint8_t>(std::clamp(value, 0, 255));
    }
  }
  return pattern;
}

BinaryMask mask_to_grid(const BinaryMask& mask, std::size_t grid_w, std::size_t grid_h) {
  if (grid_w == 0 || grid_h == 0) throw ShapeError("mask_to_grid: empty grid");
  if (grid_w > mask.width() || grid_h > mask.height())
    throw ShapeError("mask_to_grid: grid finer than the mask");
  BinaryMask out(grid_w, grid_h);
  for (std::size_t gy = 0; gy < grid_h; ++gy) {
    const std::size_t y0 = gy * mask.height() / grid_h;
    const std::size_t y1 = (gy + 1) * mask.height() / grid_h;
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      const std::size_t x0 = gx * mask.width() / grid_w;
      const std::size_t x1 = (gx + 1) * mask.width() / grid_w;
      std::size_t object = 0, labelled = 0;
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) {
          const auto v = mask.at(x, y);
          if (v == BinaryMask::kIgnore) continue;
          ++labelled;
          object += v == BinaryMask::kObject;
        }
      std::uint8_t label = BinaryMask::kBackground;
      if (labelled == 0) label = BinaryMask::kIgnore;
      else if (2 * object > labelled) label = BinaryMask::kObject;
      out.set(gx, gy, label);
    }
  }
  return out;
}

LayerStats region_stats(std::span<const EntropyMap> maps, const BinaryMask& mask) {
  LayerStats stats;
  stats.reserve(maps.size());
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const auto& map = maps[l];
    const BinaryMask grid = mask_to_grid(mask, map.width(), map.height());
    double obj_sum = 0.0, bg_sum = 0.0;
    std::size_t obj_n = 0, bg_n = 0;
    for (std::size_t y = 0; y < map.height(); ++y)
      for (std::size_t x = 0; x < map.width(); ++x) {
        const auto label = grid.at(x, y);
        if (label == BinaryMask::kObject) {
          obj_sum += map.at(x, y);
          ++obj_n;
        } else if (label == BinaryMask::kBackground) {
          bg_sum += map.at(x, y);
          ++bg_n;
        }
      }
    if (obj_n == 0 || bg_n == 0)
      throw DomainError("layer " + std::to_string(l) + ": " +
                        (obj_n == 0 ? "no object" : "no background") +
                        " cells at " + std::to_string(map.width()) + "x" +
                        std::to_string(map.height()));
    stats.push_back({obj_sum / static_cast<double>(obj_n),
                     bg_sum / static_cast<double>(bg_n)});
  }
  return stats;
}

std::vector<std::size_t> select_layers(const LayerStats& stats, double ratio) {
  if (!(ratio > 1.0)) throw ConfigError("selection ratio must exceed 1");
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < stats.size(); ++l)
    if (stats[l].bg_mean >= ratio * stats[l].obj_mean) out.push_back(l);
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

void check_problem(const Matrix& features, std::span<const std::uint8_t> labels,
                   std::span<const double> weights) {
  if (features.rows() != labels.size())
    throw ShapeError("logistic: " + std::to_string(features.rows()) + " samples, " +
                     std::to_string(labels.size()) + " labels");
  if (weights.size() != features.cols())
    throw ShapeError("logistic: weight count does not match feature count");
}

// log(1 + exp(x)) without overflow.
double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double logit(const Matrix& features, std::size_t i, std::span<const double> w,
             double b) {
  double z = b;
  auto row = features.row(i);
  for (std::size_t k = 0; k < row.size(); ++k) z += w[k] * row[k];
  return z;
}

}  // namespace

double logistic_loss(const Matrix& features, std::span<const std::uint8_t> labels,
                     std::span<const double> weights, double bias, double l2) {
  check_problem(features, labels, weights);
  double loss = 0.0;
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const double z = logit(features, i, weights, bias);
    // -[y log s(z) + (1-y) log(1 - s(z))] = softplus(z) - y z
    loss += softplus(z) - (labels[i] ? z : 0.0);
  }
  loss /= static_cast<double>(features.rows());
  double norm = 0.0;
  for (double w : weights) norm += w * w;
  return loss + l2 * norm;
}

std::vector<double> logistic_gradient(const Matrix& features,
                                      std::span<const std::uint8_t> labels,
                                      std::span<const double> weights, double bias,
                                      double l2) {
  check_problem(features, labels, weights);
  const std::size_t L = features.cols();
  std::vector<double> grad(L + 1, 0.0);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const double err = sigmoid(logit(features, i, weights, bias)) - labels[i];
    auto row = features.row(i);
    for (std::size_t k = 0; k < L; ++k) grad[k] += err * row[k];
    grad[L] += err;
  }
  const double inv = 1.0 / static_cast<double>(features.rows());
  for (auto& g : grad) g *= inv;
  for (std::size_t k = 0; k < L; ++k) grad[k] += 2.0 * l2 * weights[k];
  return grad;
}

LogisticFit fit_layer_weights(const Matrix& features,
                              std::span<const std::uint8_t> labels,
                              const LogisticOptions& options) {
  if (features.rows() == 0) throw DomainError("logistic: no samples");
  std::size_t positives = 0;
  for (auto y : labels) {
    if (y > 1) throw DomainError("logistic: labels must be 0 or 1");
    positives += y;
  }
  if (positives == 0 || positives == labels.size())
    throw DomainError("logistic: labels are single-class");
  for (double v : features.data())
    if (!std::isfinite(v)) throw DomainError("logistic: non-finite feature");

  LogisticFit fit;
  fit.weights.assign(features.cols(), 0.0);
  const std::size_t L = features.cols();
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    fit.loss_trace.push_back(
        logistic_loss(features, labels, fit.weights, fit.bias, options.l2));
    const auto grad =
        logistic_gradient(features, labels, fit.weights, fit.bias, options.l2);
    for (std::size_t k = 0; k < L; ++k) fit.weights[k] -= options.lr * grad[k];
    fit.bias -= options.lr * grad[L];
  }
  fit.loss_trace.push_back(
      logistic_loss(features, labels, fit.weights, fit.bias, options.l2));
  return fit;
}

SelectionReport select_from_stack(const AttentionStack& stack, const BinaryMask& mask,
                                  double ratio, const ExtractOptions& options) {
  const auto maps = layer_entropy_maps(stack, options);
  SelectionReport report;
  report.ratio = ratio;
  report.stats = region_stats(maps, mask);
  report.selected = select_layers(report.stats, ratio);
  if (report.selected.empty()) {
    report.fallback_used = true;
    report.aggregation = LayerAggregation::all_layers(maps.size());
  } else {
    report.aggregation = LayerAggregation::uniform(report.selected);
  }
  return report;
}

PatternSpec pattern_for_model(const VitConfig& config, std::uint64_t seed) {
  PatternSpec spec;
  spec.width = spec.height = config.image_size();
  spec.cx = spec.cy = static_cast<double>(spec.width) / 2.0;
  spec.radius = std::max(static_cast<double>(config.patch_size),
                         static_cast<double>(spec.width) / 4.0);
  spec.patch_size = config.patch_size;
  spec.seed = seed;
  return spec;
}

SelectionReport auto_select(const VitWeights& weights, const VitConfig& config,
                            const AutoSelectOptions& options) {
  const auto pattern = gen_test_pattern(pattern_for_model(config, options.seed));
  const auto stack = vit_forward(pattern.image, weights, config, options.extract.threads);
  return select_from_stack(stack, pattern.object_mask, options.ratio, options.extract);
}

nlohmann::json selection_to_json(const SelectionReport& report) {
  nlohmann::json per_layer = nlohmann::json::array();
  for (std::size_t l = 0; l < report.stats.size(); ++l) {
    const auto& s = report.stats[l];
    nlohmann::json entry{{"layer", l}, {"obj_mean", s.obj_mean}, {"bg_mean", s.bg_mean}};
    entry["ratio"] = s.obj_mean > 0.0 ? nlohmann::json(s.bg_mean / s.obj_mean)
                                      : nlohmann::json(nullptr);
    entry["selected"] = std::find(report.selected.begin(), report.selected.end(), l) !=
                        report.selected.end();
    per_layer.push_back(std::move(entry));
  }
  return {{"per_layer", std::move(per_layer)},
          {"threshold_ratio", report.ratio},
          {"selection", report.selected},
          {"fallback_used", report.fallback_used},
          {"aggregation", aggregation_to_json(report.aggregation)}};
}

}  // namespace attentropy
