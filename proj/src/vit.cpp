#include "attentropy/vit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "attentropy/error.hpp"
#include "attentropy/parallel.hpp"

namespace attentropy {
namespace {

// Uniform on [-a, a] with a = sqrt(3) * stddev, drawn from the raw 64-bit
// engine output so the sequence does not depend on the standard library's
// distribution implementations.
class WeightSampler {
 public:
  WeightSampler(std::uint64_t seed, double stddev)
      : engine_(seed), half_width_(std::sqrt(3.0) * stddev) {}

  double next() {
    const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;  // [0,1)
    return static_cast<double>(static_cast<float>((2.0 * u - 1.0) * half_width_));
  }

  Matrix matrix(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = next();
    return m;
  }

 private:
  std::mt19937_64 engine_;
  double half_width_;
};

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols,
                  const char* name) {
  if (m.rows() != rows || m.cols() != cols)
    throw ShapeError(std::string(name) + " has shape " + std::to_string(m.rows()) +
                     "x" + std::to_string(m.cols()) + ", expected " +
                     std::to_string(rows) + "x" + std::to_string(cols));
}

void check_layer(const LayerWeights& l, const VitConfig& c) {
  const std::size_t C = c.channels;
  expect_shape(l.w_q, C, C, "w_q");
  expect_shape(l.w_k, C, C, "w_k");
  expect_shape(l.w_v, C, C, "w_v");
  expect_shape(l.w_o, C, C, "w_o");
  expect_shape(l.mlp_w1, C, c.mlp_hidden(), "mlp_w1");
  expect_shape(l.mlp_b1, 1, c.mlp_hidden(), "mlp_b1");
  expect_shape(l.mlp_w2, c.mlp_hidden(), C, "mlp_w2");
  expect_shape(l.mlp_b2, 1, C, "mlp_b2");
}

void add_bias_rows(Matrix& m, const Matrix& bias) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias(0, c);
  }
}

}  // namespace

void VitConfig::validate() const {
  if (patch_size < 1) throw ConfigError("patch_size must be >= 1");
  if (grid_n < 1) throw ConfigError("grid_n must be >= 1");
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (heads < 1) throw ConfigError("heads must be >= 1");
  if (channels < 1) throw ConfigError("channels must be >= 1");
  if (channels % heads != 0)
    throw ConfigError("C not divisible by m (C=" + std::to_string(channels) +
                      ", m=" + std::to_string(heads) + ")");
}

void VitWeights::check(const VitConfig& config) const {
  config.validate();
  expect_shape(patch_embed, config.input_dim(), config.channels, "patch_embed");
  expect_shape(pos_embed, config.token_count(), config.channels, "pos_embed");
  if (layers.size() != config.layers)
    throw ShapeError("weights hold " + std::to_string(layers.size()) +
                     " layers, config says " + std::to_string(config.layers));
  for (const auto& l : layers) check_layer(l, config);
}

VitWeights init_model(const VitConfig& config, std::uint64_t seed,
                      const InitOptions& options) {
  config.validate();
  const std::size_t C = config.channels;
  WeightSampler rng(seed, 1.0 / std::sqrt(static_cast<double>(C)));

  VitWeights w;
  w.patch_embed = rng.matrix(config.input_dim(), C);
  w.pos_embed = rng.matrix(config.token_count(), C);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights lw;
    lw.w_q = rng.matrix(C, C);
    lw.w_k = rng.matrix(C, C);
    lw.w_v = rng.matrix(C, C);
    lw.w_o = rng.matrix(C, C);
    lw.mlp_w1 = rng.matrix(C, config.mlp_hidden());
    lw.mlp_b1 = Matrix(1, config.mlp_hidden());
    lw.mlp_w2 = rng.matrix(config.mlp_hidden(), C);
    lw.mlp_b2 = Matrix(1, C);
    if (options.zero_qk) {
      lw.w_q = Matrix(C, C);
      lw.w_k = Matrix(C, C);
    }
    w.layers.push_back(std::move(lw));
  }
  return w;
}

void AttentionStack::validate(double tolerance) const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const std::string where = "layer " + std::to_string(l) + ": ";
    if (layer.heads.empty()) throw ShapeError(where + "no heads");
    if (layer.reduction_r < 1) throw ShapeError(where + "reduction_r must be >= 1");
    const std::size_t cls = has_class_token ? 1 : 0;
    const std::size_t patch_tokens = layer.grid_n * layer.grid_n;
    if (layer.cols() != patch_tokens + cls)
      throw ShapeError(where + "column count " + std::to_string(layer.cols()) +
                       " != tokens " + std::to_string(patch_tokens + cls));
    if (layer.rows() < cls ||
        (layer.rows() - cls) * layer.reduction_r != patch_tokens)
      throw ShapeError(where + "rows * reduction_r must equal patch tokens");
    for (const auto& head : layer.heads) {
      if (head.rows() != layer.rows() || head.cols() != layer.cols())
        throw ShapeError(where + "heads disagree in shape");
      for (std::size_t r = 0; r < head.rows(); ++r) {
        double sum = 0.0;
        for (double v : head.row(r)) {
          if (!(v >= 0.0) || !std::isfinite(v))
            throw DomainError(where + "attention entry outside [0, inf)");
          sum += v;
        }
        if (std::abs(sum - 1.0) > tolerance)
          throw DomainError(where + "row " + std::to_string(r) + " sums to " +
                            std::to_string(sum));
      }
    }
  }
}

Matrix patchify(const GrayImage& image, const VitConfig& config) {
  config.validate();
  const std::size_t side = config.image_size();
  if (image.width != side || image.height != side)
    throw ShapeError("image is " + std::to_string(image.width) + "x" +
                     std::to_string(image.height) + ", model expects " +
                     std::to_string(side) + "x" + std::to_string(side));
  const std::size_t p = config.patch_size;
  const std::size_t offset = config.use_class_token ? 1 : 0;
  Matrix out(config.token_count(), config.input_dim());
  for (std::size_t gy = 0; gy < config.grid_n; ++gy) {
    for (std::size_t gx = 0; gx < config.grid_n; ++gx) {
      auto row = out.row(offset + gy * config.grid_n + gx);
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          row[y * p + x] = image.at(gx * p + x, gy * p + y) / 255.0;
    }
  }
  return out;
}

Matrix embed(const GrayImage& image, const VitWeights& weights,
             const VitConfig& config) {
  return add(matmul(patchify(image, config), weights.patch_embed),
             weights.pos_embed);
}

void softmax_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (auto& v : row) v /= sum;
  }
}

AttentionOutput attention_forward(const Matrix& z, const LayerWeights& layer,
                                  const VitConfig& config, unsigned threads) {
  config.validate();
  if (z.cols() != config.channels)
    throw ShapeError("Z has " + std::to_string(z.cols()) + " channels, expected " +
                     std::to_string(config.channels));
  check_layer(layer, config);

  const std::size_t m = config.heads;
  const std::size_t d = config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const Matrix q = matmul(z, layer.w_q);
  const Matrix k = matmul(z, layer.w_k);
  const Matrix v = matmul(z, layer.w_v);

  AttentionOutput out;
  out.attention.resize(m);
  out.sa_concat = Matrix(z.rows(), m * d);
  parallel_for(m, threads, [&](std::size_t i) {
    Matrix scores = matmul_transposed(column_block(q, i * d, d),
                                      column_block(k, i * d, d));
    for (auto& s : scores.data()) s *= scale;
    softmax_rows(scores);
    const Matrix sa = matmul(scores, column_block(v, i * d, d));
    for (std::size_t r = 0; r < sa.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) out.sa_concat(r, i * d + c) = sa(r, c);
    out.attention[i] = std::move(scores);
  });
  return out;
}

BlockOutput msa_block(const Matrix& z, const LayerWeights& layer,
                      const VitConfig& config, unsigned threads) {
  auto att = attention_forward(z, layer, config, threads);
  const Matrix msa = add(att.sa_concat, matmul(att.sa_concat, layer.w_o));
  Matrix hidden = matmul(msa, layer.mlp_w1);
  add_bias_rows(hidden, layer.mlp_b1);
  for (auto& h : hidden.data()) h = std::max(0.0, h);
  Matrix mlp = matmul(hidden, layer.mlp_w2);
  add_bias_rows(mlp, layer.mlp_b2);
  return {add(msa, mlp), std::move(att.attention)};
}

AttentionStack vit_forward(const GrayImage& image, const VitWeights& weights,
                           const VitConfig& config, unsigned threads) {
  weights.check(config);
  Matrix z = embed(image, weights, config);
  AttentionStack stack;
  stack.has_class_token = config.use_class_token;
  for (const auto& layer : weights.layers) {
    auto block = msa_block(z, layer, config, threads);
    for (double v : block.z_next.data())
      if (!std::isfinite(v)) throw DomainError("activation overflow in forward pass");
    stack.layers.push_back({std::move(block.attention), config.grid_n, 1});
    z = std::move(block.z_next);
  }
  return stack;
}

}  // namespace attentropy
