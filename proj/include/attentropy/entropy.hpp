#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "attentropy/error.hpp"
#include "attentropy/matrix.hpp"
#include "attentropy/tensor.hpp"
#include "attentropy/vit.hpp"

namespace attentropy {

// Row-major 2-D field of finite doubles. The tag keeps entropy grids and
// pixel score maps from being mixed up.
template <typename Tag>
class Field2D {
 public:
  Field2D() = default;
  Field2D(std::size_t width, std::size_t height, double fill = 0.0)
      : width_(width), height_(height), values_(width * height, fill) {
    check();
  }
  Field2D(std::size_t width, std::size_t height, std::vector<double> values)
      : width_(width), height_(height), values_(std::move(values)) {
    if (values_.size() != width_ * height_)
      throw ShapeError("field has " + std::to_string(values_.size()) +
                       " values, expected " + std::to_string(width_ * height_));
    check();
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::span<const double> values() const { return values_; }
  double at(std::size_t x, std::size_t y) const { return values_[y * width_ + x]; }

  bool operator==(const Field2D&) const = default;

 private:
  void check() const {
    for (double v : values_)
      if (!std::isfinite(v)) throw DomainError("field contains non-finite value");
  }

  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<double> values_;
};

struct EntropyTag {};
struct ScoreTag {};
// Per-patch attention entropy in nats.
using EntropyMap = Field2D<EntropyTag>;
// Per-pixel object score; higher means more object-like.
using ScoreMap = Field2D<ScoreTag>;

// How per-layer entropy maps are combined.
struct LayerAggregation {
  enum class Mode { kUniformSubset, kWeighted };

  Mode mode = Mode::kUniformSubset;
  std::vector<std::size_t> subset;  // 0-based layer indices (uniform mode)
  std::vector<double> weights;      // one per layer (weighted mode)
  double bias = 0.0;

  static LayerAggregation uniform(std::vector<std::size_t> layers);
  static LayerAggregation all_layers(std::size_t layer_count);
  static LayerAggregation weighted(std::vector<double> a, double b);

  // Throws ConfigError when the aggregation cannot apply to `layer_count` maps.
  void validate(std::size_t layer_count) const;

  bool operator==(const LayerAggregation&) const = default;
};

nlohmann::json aggregation_to_json(const LayerAggregation& agg);
LayerAggregation aggregation_from_json(const nlohmann::json& j);

// Mean over heads; rows stay stochastic. Throws DomainError for zero heads.
Matrix average_heads(std::span<const Matrix> heads);

// Drops row 0 and column 0. With `renormalize`, remaining rows are rescaled
// to sum to one, and rows with no remaining mass become uniform.
Matrix strip_class_token(const Matrix& attention, bool renormalize);

// -sum p ln p with 0 ln 0 = 0. Throws DomainError on negative entries.
double shannon_entropy(std::span<const double> p);
std::vector<double> row_entropy(const Matrix& attention);

// Row-major reshape. Throws ShapeError when sizes disagree.
EntropyMap entropy_grid(std::span<const double> entropies, std::size_t grid_w,
                        std::size_t grid_h);

// Bilinear resampling with half-pixel (cell-centre) alignment and edge
// clamping. Output at an aligned input centre equals that input exactly and
// every output lies within the range of its four source samples.
template <typename Tag>
Field2D<Tag> resample_bilinear(const Field2D<Tag>& in, std::size_t out_w,
                               std::size_t out_h);

struct ExtractOptions {
  bool renormalize = true;
  unsigned threads = 1;
};

// Head average, optional class-token strip, row entropy and reshape for every
// layer. Reduced layers yield a sqrt(R) x sqrt(R) grid; non-square reduced
// row counts are rejected with ShapeError.
std::vector<EntropyMap> layer_entropy_maps(const AttentionStack& stack,
                                           const ExtractOptions& options = {});

// Largest grid among `maps` (by cell count, first wins on ties).
std::pair<std::size_t, std::size_t> finest_grid(std::span<const EntropyMap> maps);

// Resamples every map to (common_w, common_h) and combines them: arithmetic
// mean over the subset, or sigmoid(sum_l a_l E^l + b) in weighted mode.
EntropyMap aggregate_layers(std::span<const EntropyMap> maps,
                            const LayerAggregation& agg, std::size_t common_w,
                            std::size_t common_h);

// Uniform mode negates then interpolates to image resolution; weighted mode
// only interpolates, since the regression output is already object-oriented.
ScoreMap to_score(const EntropyMap& map, std::size_t image_w, std::size_t image_h,
                  bool weighted_mode);

// 1 where score >= threshold. NaN thresholds are rejected.
BinaryMask binarize(const ScoreMap& scores, double threshold);

template <typename Tag>
struct Window {
  Field2D<Tag> field;
  std::size_t x = 0;
  std::size_t y = 0;
};

// Mean of all windows covering each output cell. Throws DomainError when a
// cell is left uncovered, ShapeError when a window falls outside the frame.
template <typename Tag>
Field2D<Tag> merge_windows(std::span<const Window<Tag>> windows, std::size_t full_w,
                           std::size_t full_h);

// Window origins along one axis: 0, stride, 2*stride, ... with a final
// window flush against the far edge. Throws ConfigError if window > extent.
std::vector<std::size_t> window_origins(std::size_t extent, std::size_t window,
                                        std::size_t stride);

// --- template definitions ---

namespace detail {
struct Tap {
  std::size_t i0;
  std::size_t i1;
  double t;
};
// Source taps for each output index under half-pixel alignment.
std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out);
}  // namespace detail

template <typename Tag>
Field2D<Tag> resample_bilinear(const Field2D<Tag>& in, std::size_t out_w,
                               std::size_t out_h) {
  if (in.width() == 0 || in.height() == 0) throw ShapeError("resample: empty input");
  if (out_w == 0 || out_h == 0) throw ShapeError("resample: zero output size");
  if (out_w == in.width() && out_h == in.height()) return in;
  const auto xs = detail::bilinear_taps(in.width(), out_w);
  const auto ys = detail::bilinear_taps(in.height(), out_h);
  std::vector<double> out(out_w * out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto& ty = ys[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& tx = xs[x];
      const double v00 = in.at(tx.i0, ty.i0), v01 = in.at(tx.i1, ty.i0);
      const double v10 = in.at(tx.i0, ty.i1), v11 = in.at(tx.i1, ty.i1);
      const double top = v00 + tx.t * (v01 - v00);
      const double bottom = v10 + tx.t * (v11 - v10);
      double v = top + ty.t * (bottom - top);
      // Rounding in the lerp can step a hair outside the source range.
      const double lo = std::min(std::min(v00, v01), std::min(v10, v11));
      const double hi = std::max(std::max(v00, v01), std::max(v10, v11));
      out[y * out_w + x] = std::clamp(v, lo, hi);
    }
  }
  return Field2D<Tag>(out_w, out_h, std::move(out));
}

template <typename Tag>
Field2D<Tag> merge_windows(std::span<const Window<Tag>> windows, std::size_t full_w,
                           std::size_t full_h) {
  std::vector<double> sum(full_w * full_h, 0.0);
  std::vector<std::size_t> count(full_w * full_h, 0);
  for (const auto& w : windows) {
    if (w.x + w.field.width() > full_w || w.y + w.field.height() > full_h)
      throw ShapeError("window at (" + std::to_string(w.x) + ", " +
                       std::to_string(w.y) + ") exceeds the frame");
    for (std::size_t y = 0; y < w.field.height(); ++y)
      for (std::size_t x = 0; x < w.field.width(); ++x) {
        const std::size_t idx = (w.y + y) * full_w + (w.x + x);
        sum[idx] += w.field.at(x, y);
        ++count[idx];
      }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) {
    if (count[i] == 0)
      throw DomainError("uncovered pixel at (" + std::to_string(i % full_w) + ", " +
                        std::to_string(i / full_w) + ")");
    sum[i] /= static_cast<double>(count[i]);
  }
  return Field2D<Tag>(full_w, full_h, std::move(sum));
}

}  // namespace attentropy
