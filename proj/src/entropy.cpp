#include "attentropy/entropy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "attentropy/parallel.hpp"

namespace attentropy {

namespace detail {

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double last = static_cast<double>(in - 1);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, last);
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

LayerAggregation LayerAggregation::uniform(std::vector<std::size_t> layers) {
  LayerAggregation agg;
  agg.mode = Mode::kUniformSubset;
  agg.subset = std::move(layers);
  return agg;
}

LayerAggregation LayerAggregation::all_layers(std::size_t layer_count) {
  std::vector<std::size_t> all(layer_count);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return uniform(std::move(all));
}

LayerAggregation LayerAggregation::weighted(std::vector<double> a, double b) {
  LayerAggregation agg;
  agg.mode = Mode::kWeighted;
  agg.weights = std::move(a);
  agg.bias = b;
  return agg;
}

void LayerAggregation::validate(std::size_t layer_count) const {
  if (mode == Mode::kUniformSubset) {
    if (subset.empty()) throw ConfigError("layer subset is empty");
    std::set<std::size_t> seen;
    for (auto l : subset) {
      if (l >= layer_count)
        throw ConfigError("layer index " + std::to_string(l) + " out of range (" +
                          std::to_string(layer_count) + " layers)");
      if (!seen.insert(l).second)
        throw ConfigError("layer index " + std::to_string(l) + " listed twice");
    }
  } else {
    if (weights.size() != layer_count)
      throw ConfigError("weighted aggregation has " + std::to_string(weights.size()) +
                        " weights for " + std::to_string(layer_count) + " layers");
    for (double w : weights)
      if (!std::isfinite(w)) throw ConfigError("non-finite layer weight");
    if (!std::isfinite(bias)) throw ConfigError("non-finite bias");
  }
}

nlohmann::json aggregation_to_json(const LayerAggregation& agg) {
  if (agg.mode == LayerAggregation::Mode::kUniformSubset)
    return {{"mode", "uniform_subset"}, {"subset", agg.subset}};
  return {{"mode", "weighted"}, {"weights", agg.weights}, {"bias", agg.bias}};
}

LayerAggregation aggregation_from_json(const nlohmann::json& j) {
  try {
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "uniform_subset")
      return LayerAggregation::uniform(j.at("subset").get<std::vector<std::size_t>>());
    if (mode == "weighted")
      return LayerAggregation::weighted(j.at("weights").get<std::vector<double>>(),
                                        j.at("bias").get<double>());
    throw ConfigError("unknown aggregation mode " + mode);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("aggregation JSON: ") + e.what());
  }
}

Matrix average_heads(std::span<const Matrix> heads) {
  if (heads.empty()) throw DomainError("average_heads: no heads");
  Matrix out(heads[0].rows(), heads[0].cols());
  for (const auto& h : heads) {
    if (h.rows() != out.rows() || h.cols() != out.cols())
      throw ShapeError("average_heads: heads differ in shape");
    auto dst = out.data();
    auto src = h.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  const double inv = 1.0 / static_cast<double>(heads.size());
  for (auto& v : out.data()) v *= inv;
  return out;
}

Matrix strip_class_token(const Matrix& attention, bool renormalize) {
  if (attention.rows() < 2 || attention.cols() < 2)
    throw ShapeError("strip_class_token needs at least 2 tokens");
  Matrix out(attention.rows() - 1, attention.cols() - 1);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto dst = out.row(r);
    auto src = attention.row(r + 1);
    std::copy(src.begin() + 1, src.end(), dst.begin());
    if (!renormalize) continue;
    const double sum = std::accumulate(dst.begin(), dst.end(), 0.0);
    if (sum > 0.0) {
      for (auto& v : dst) v /= sum;
    } else {
      std::fill(dst.begin(), dst.end(), 1.0 / static_cast<double>(dst.size()));
    }
  }
  return out;
}

double shannon_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v < 0.0 || std::isnan(v))
      throw DomainError("entropy of a negative probability " + std::to_string(v));
    if (v > 0.0) h -= v * std::log(v);
  }
  // Rows summing to slightly above one can give -0.0 or a tiny negative value.
  return std::max(h, 0.0);
}

std::vector<double> row_entropy(const Matrix& attention) {
  std::vector<double> out(attention.rows());
  for (std::size_t r = 0; r < attention.rows(); ++r)
    out[r] = shannon_entropy(attention.row(r));
  return out;
}

EntropyMap entropy_grid(std::span<const double> entropies, std::size_t grid_w,
                        std::size_t grid_h) {
  if (entropies.size() != grid_w * grid_h)
    throw ShapeError("entropy_grid: " + std::to_string(entropies.size()) +
                     " values do not fill a " + std::to_string(grid_w) + "x" +
                     std::to_string(grid_h) + " grid");
  return EntropyMap(grid_w, grid_h,
                    std::vector<double>(entropies.begin(), entropies.end()));
}

std::vector<EntropyMap> layer_entropy_maps(const AttentionStack& stack,
                                           const ExtractOptions& options) {
  std::vector<EntropyMap> maps(stack.layers.size());
  parallel_for(stack.layers.size(), options.threads, [&](std::size_t l) {
    const auto& layer = stack.layers[l];
    Matrix mean = average_heads(layer.heads);
    if (stack.has_class_token) mean = strip_class_token(mean, options.renormalize);
    const std::size_t rows = mean.rows();
    const auto side =
        static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(rows))));
    if (side * side != rows)
      throw ShapeError("layer " + std::to_string(l) + ": " + std::to_string(rows) +
                       " rows do not form a square grid");
    maps[l] = entropy_grid(row_entropy(mean), side, side);
  });
  return maps;
}

std::pair<std::size_t, std::size_t> finest_grid(std::span<const EntropyMap> maps) {
  std::pair<std::size_t, std::size_t> best{0, 0};
  for (const auto& m : maps)
    if (m.width() * m.height() > best.first * best.second)
      best = {m.width(), m.height()};
  return best;
}

EntropyMap aggregate_layers(std::span<const EntropyMap> maps,
                            const LayerAggregation& agg, std::size_t common_w,
                            std::size_t common_h) {
  agg.validate(maps.size());
  if (common_w == 0 || common_h == 0) throw ShapeError("zero common grid size");
  std::vector<double> acc(common_w * common_h, 0.0);
  if (agg.mode == LayerAggregation::Mode::kUniformSubset) {
    for (auto l : agg.subset) {
      const auto r = resample_bilinear(maps[l], common_w, common_h);
      auto v = r.values();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
    }
    const double inv = 1.0 / static_cast<double>(agg.subset.size());
    for (auto& v : acc) v *= inv;
  } else {
    for (std::size_t l = 0; l < maps.size(); ++l) {
      const auto r = resample_bilinear(maps[l], common_w, common_h);
      auto v = r.values();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += agg.weights[l] * v[i];
    }
    for (auto& v : acc) v = 1.0 / (1.0 + std::exp(-(v + agg.bias)));
  }
  return EntropyMap(common_w, common_h, std::move(acc));
}

ScoreMap to_score(const EntropyMap& map, std::size_t image_w, std::size_t image_h,
                  bool weighted_mode) {
  std::vector<double> values(map.values().begin(), map.values().end());
  if (!weighted_mode)
    for (auto& v : values) v = -v;
  return resample_bilinear(ScoreMap(map.width(), map.height(), std::move(values)),
                           image_w, image_h);
}

BinaryMask binarize(const ScoreMap& scores, double threshold) {
  if (std::isnan(threshold)) throw DomainError("binarize: NaN threshold");
  std::vector<std::uint8_t> out(scores.values().size());
  auto s = scores.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = s[i] >= threshold ? BinaryMask::kObject : BinaryMask::kBackground;
  return BinaryMask(scores.width(), scores.height(), std::move(out));
}

std::vector<std::size_t> window_origins(std::size_t extent, std::size_t window,
                                        std::size_t stride) {
  if (window == 0 || stride == 0) throw ConfigError("window and stride must be > 0");
  if (window > extent)
    throw ConfigError("window " + std::to_string(window) + " exceeds extent " +
                      std::to_string(extent));
  std::vector<std::size_t> origins;
  for (std::size_t o = 0; o + window <= extent; o += stride) origins.push_back(o);
  if (origins.back() + window < extent) origins.push_back(extent - window);
  return origins;
}

}  // namespace attentropy
