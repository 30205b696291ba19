#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "attentropy/matrix.hpp"
#include "attentropy/tensor.hpp"

namespace attentropy {

// Geometry of the toy encoder. Single-channel input only.
struct VitConfig {
  std::size_t patch_size = 16;
  std::size_t grid_n = 1;
  std::size_t channels = 1;
  std::size_t heads = 1;
  std::size_t layers = 1;
  bool use_class_token = false;

  // Throws ConfigError if any invariant fails.
  void validate() const;

  std::size_t head_dim() const { return channels / heads; }
  std::size_t patch_tokens() const { return grid_n * grid_n; }
  std::size_t token_count() const {
    return patch_tokens() + (use_class_token ? 1 : 0);
  }
  std::size_t input_dim() const { return patch_size * patch_size; }
  std::size_t image_size() const { return grid_n * patch_size; }
  std::size_t mlp_hidden() const { return 4 * channels; }

  bool operator==(const VitConfig&) const = default;
};

// Per-head projections are packed column-wise: head i owns columns
// [i*d, (i+1)*d) of w_q, w_k and w_v.
struct LayerWeights {
  Matrix w_q;     // C x (m*d)
  Matrix w_k;     // C x (m*d)
  Matrix w_v;     // C x (m*d)
  Matrix w_o;     // (m*d) x C
  Matrix mlp_w1;  // C x 4C
  Matrix mlp_b1;  // 1 x 4C
  Matrix mlp_w2;  // 4C x C
  Matrix mlp_b2;  // 1 x C
};

struct VitWeights {
  Matrix patch_embed;  // patch_size^2 x C
  Matrix pos_embed;    // T x C
  std::vector<LayerWeights> layers;

  // Throws ShapeError if any matrix disagrees with `config`.
  void check(const VitConfig& config) const;
};

struct InitOptions {
  // Zero query/key projections give uniform attention in every layer.
  bool zero_qk = false;
};

// Entries are zero-mean uniform with standard deviation 1/sqrt(C), rounded
// to float32 so that persisted weights reload exactly. Biases start at zero.
VitWeights init_model(const VitConfig& config, std::uint64_t seed,
                      const InitOptions& options = {});

// One attention layer: heads of shape rows x cols. `rows == cols` for full
// attention; reduced (Segformer-style) layers keep `rows * reduction_r`
// equal to the patch-token count, plus one class row when present.
struct LayerAttention {
  std::vector<Matrix> heads;
  std::size_t grid_n = 0;       // patch grid side of the full token set
  std::size_t reduction_r = 1;

  std::size_t head_count() const { return heads.size(); }
  std::size_t rows() const { return heads.empty() ? 0 : heads[0].rows(); }
  std::size_t cols() const { return heads.empty() ? 0 : heads[0].cols(); }
};

struct AttentionStack {
  std::vector<LayerAttention> layers;
  bool has_class_token = false;

  // Checks shape bookkeeping and that every head row is a probability
  // vector within `tolerance`. Throws ShapeError or DomainError.
  void validate(double tolerance = 1e-6) const;
};

// Flattens each patch (row-major patch order) into a row scaled to [0, 1].
// A zero row is prepended for the class token when enabled.
Matrix patchify(const GrayImage& image, const VitConfig& config);

// Z^0 = patchify(image) * patch_embed + pos_embed.
Matrix embed(const GrayImage& image, const VitWeights& weights,
             const VitConfig& config);

struct AttentionOutput {
  std::vector<Matrix> attention;  // m heads, T x T
  Matrix sa_concat;               // T x (m*d)
};

// A_i = softmax(Z W_Q,i (Z W_K,i)^T / sqrt(d)), SA_i = A_i Z W_V,i.
AttentionOutput attention_forward(const Matrix& z, const LayerWeights& layer,
                                  const VitConfig& config, unsigned threads = 1);

struct BlockOutput {
  Matrix z_next;
  std::vector<Matrix> attention;
};

// MSA = SA + SA W_O; Z' = MSA + MLP(MSA), MLP = affine, max(0, .), affine.
BlockOutput msa_block(const Matrix& z, const LayerWeights& layer,
                      const VitConfig& config, unsigned threads = 1);

AttentionStack vit_forward(const GrayImage& image, const VitWeights& weights,
                           const VitConfig& config, unsigned threads = 1);

// Row-wise numerically stable softmax, in place.
void softmax_rows(Matrix& m);

// Persistence: config.json plus manifest.json listing one NPY per matrix.
void save_config(const VitConfig& config, const std::filesystem::path& path);
VitConfig load_config(const std::filesystem::path& path);
void save_model(const VitConfig& config, const VitWeights& weights,
                std::uint64_t seed, const std::filesystem::path& dir);
struct LoadedModel {
  VitConfig config;
  VitWeights weights;
};
LoadedModel load_model(const std::filesystem::path& dir);

// Attention dumps: manifest.json plus attention_layerNN.npy of shape (m, R, T).
void save_attention(const AttentionStack& stack, const std::filesystem::path& dir);
AttentionStack load_attention(const std::filesystem::path& dir);

}  // namespace attentropy
