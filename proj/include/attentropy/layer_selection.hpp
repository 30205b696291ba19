#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "attentropy/entropy.hpp"
#include "attentropy/matrix.hpp"
#include "attentropy/tensor.hpp"
#include "attentropy/vit.hpp"

namespace attentropy {

struct TestPattern {
  GrayImage image;
  BinaryMask object_mask;  // 1 inside the circle
};

struct PatternSpec {
  std::size_t width = 256;
  std::size_t height = 256;
  double cx = 128.0;
  double cy = 128.0;
  double radius = 40.0;
  std::size_t patch_size = 16;
  std::uint64_t seed = 0;
};

// Checkerboard-plus-noise background with a horizontally striped disc.
// Throws ConfigError when the disc leaves the image or radius < patch_size.
TestPattern gen_test_pattern(const PatternSpec& spec);

// Majority-vote downsampling of a pixel mask onto a grid_w x grid_h patch
// grid: a cell is object only if strictly more than half of its non-ignore
// pixels are object. Cells covering only ignore pixels become ignore.
BinaryMask mask_to_grid(const BinaryMask& mask, std::size_t grid_w, std::size_t grid_h);

struct LayerStat {
  double obj_mean = 0.0;
  double bg_mean = 0.0;
};
using LayerStats = std::vector<LayerStat>;

// Per-layer mean entropy over object and background cells, with the mask
// downsampled to each layer's grid. Throws DomainError when either region is
// empty at some resolution.
LayerStats region_stats(std::span<const EntropyMap> maps, const BinaryMask& mask);

// Layers with bg_mean >= ratio * obj_mean (0-based, ascending).
std::vector<std::size_t> select_layers(const LayerStats& stats, double ratio = 1.2);

struct LogisticFit {
  std::vector<double> weights;
  double bias = 0.0;
  std::vector<double> loss_trace;  // loss before each step, then the final loss
};

struct LogisticOptions {
  std::size_t epochs = 500;
  double lr = 0.1;
  double l2 = 1e-4;
};

// Mean binary cross-entropy + l2 * |a|^2. `features` is samples x L.
double logistic_loss(const Matrix& features, std::span<const std::uint8_t> labels,
                     std::span<const double> weights, double bias, double l2);

// Gradient of logistic_loss; the last element is d/d(bias).
std::vector<double> logistic_gradient(const Matrix& features,
                                      std::span<const std::uint8_t> labels,
                                      std::span<const double> weights, double bias,
                                      double l2);

// Full-batch gradient descent from a = 0, b = 0. Labels must be 0 or 1 and
// both classes present (DomainError otherwise).
LogisticFit fit_layer_weights(const Matrix& features,
                              std::span<const std::uint8_t> labels,
                              const LogisticOptions& options = {});

double sigmoid(double x);

struct SelectionReport {
  LayerStats stats;
  double ratio = 1.2;
  std::vector<std::size_t> selected;
  bool fallback_used = false;
  LayerAggregation aggregation;
};

// Applies the ratio rule to a stack whose object region is `mask` (pixel
// resolution). Falls back to all layers when nothing is selected.
SelectionReport select_from_stack(const AttentionStack& stack, const BinaryMask& mask,
                                  double ratio = 1.2, const ExtractOptions& options = {});

struct AutoSelectOptions {
  double ratio = 1.2;
  std::uint64_t seed = 0;
  ExtractOptions extract;
};

// Pattern sized to the model input: centred disc of radius a quarter of the
// image side (never below one patch).
PatternSpec pattern_for_model(const VitConfig& config, std::uint64_t seed);

// Renders the test pattern, runs the model and applies select_from_stack.
SelectionReport auto_select(const VitWeights& weights, const VitConfig& config,
                            const AutoSelectOptions& options = {});

nlohmann::json selection_to_json(const SelectionReport& report);

}  // namespace attentropy
