#include <cstdio>
#include <string>

#include <json.hpp>

#include "attentropy/error.hpp"
#include "attentropy/json_io.hpp"
#include "attentropy/vit.hpp"

namespace attentropy {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string layer_file(const char* prefix, std::size_t l, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%02zu%s", prefix, l, suffix);
  return buf;
}

void save_matrix(const Matrix& m, const fs::path& path) {
  save_tensor(Tensor::from_doubles({m.rows(), m.cols()}, m.data()), path);
}

Matrix load_matrix(const fs::path& path) {
  const Tensor t = load_tensor(path);
  if (t.ndim() != 2)
    throw ShapeError(path.string() + ": expected a 2-D array");
  return Matrix(t.shape()[0], t.shape()[1], t.to_doubles());
}

json config_to_json(const VitConfig& c) {
  return json{{"patch_size", c.patch_size}, {"grid_n", c.grid_n},
              {"channels", c.channels},     {"heads", c.heads},
              {"layers", c.layers},         {"use_class_token", c.use_class_token}};
}

VitConfig config_from_json(const json& j) {
  static const char* kKeys[] = {"patch_size", "grid_n", "channels",
                                "heads",      "layers", "use_class_token"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const char* k : kKeys)
    if (!j.contains(k)) throw ConfigError(std::string("model config missing key ") + k);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : kKeys) known = known || it.key() == k;
    if (!known) throw ConfigError("model config has unknown key " + it.key());
  }
  VitConfig c;
  try {
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.grid_n = j.at("grid_n").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.use_class_token = j.at("use_class_token").get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

void save_config(const VitConfig& config, const fs::path& path) {
  write_json(config_to_json(config), path);
}

VitConfig load_config(const fs::path& path) { return config_from_json(read_json(path)); }

void save_model(const VitConfig& config, const VitWeights& weights,
                std::uint64_t seed, const fs::path& dir) {
  weights.check(config);
  fs::create_directories(dir);
  save_config(config, dir / "config.json");

  json manifest;
  manifest["format"] = "attentropy-vit";
  manifest["seed"] = seed;
  manifest["config"] = config_to_json(config);
  manifest["patch_embed"] = "patch_embed.npy";
  manifest["pos_embed"] = "pos_embed.npy";
  save_matrix(weights.patch_embed, dir / "patch_embed.npy");
  save_matrix(weights.pos_embed, dir / "pos_embed.npy");

  json layers = json::array();
  for (std::size_t l = 0; l < weights.layers.size(); ++l) {
    const auto& lw = weights.layers[l];
    const std::pair<const char*, const Matrix*> entries[] = {
        {"w_q", &lw.w_q},       {"w_k", &lw.w_k},       {"w_v", &lw.w_v},
        {"w_o", &lw.w_o},       {"mlp_w1", &lw.mlp_w1}, {"mlp_b1", &lw.mlp_b1},
        {"mlp_w2", &lw.mlp_w2}, {"mlp_b2", &lw.mlp_b2}};
    json entry;
    for (const auto& [name, m] : entries) {
      const std::string file =
          layer_file("layer", l, (std::string("_") + name + ".npy").c_str());
      save_matrix(*m, dir / file);
      entry[name] = file;
    }
    layers.push_back(std::move(entry));
  }
  manifest["layers"] = std::move(layers);
  write_json(manifest, dir / "manifest.json");
}

LoadedModel load_model(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  LoadedModel out;
  try {
    out.config = config_from_json(manifest.at("config"));
    out.weights.patch_embed =
        load_matrix(dir / manifest.at("patch_embed").get<std::string>());
    out.weights.pos_embed =
        load_matrix(dir / manifest.at("pos_embed").get<std::string>());
    for (const auto& entry : manifest.at("layers")) {
      LayerWeights lw;
      auto get = [&](const char* name) {
        return load_matrix(dir / entry.at(name).get<std::string>());
      };
      lw.w_q = get("w_q");
      lw.w_k = get("w_k");
      lw.w_v = get("w_v");
      lw.w_o = get("w_o");
      lw.mlp_w1 = get("mlp_w1");
      lw.mlp_b1 = get("mlp_b1");
      lw.mlp_w2 = get("mlp_w2");
      lw.mlp_b2 = get("mlp_b2");
      out.weights.layers.push_back(std::move(lw));
    }
  } catch (const json::exception& e) {
    throw ConfigError("model manifest " + (dir / "manifest.json").string() + ": " +
                      e.what());
  }
  out.weights.check(out.config);
  return out;
}

void save_attention(const AttentionStack& stack, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "attentropy-attention";
  manifest["has_class_token"] = stack.has_class_token;
  json layers = json::array();
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    const auto& layer = stack.layers[l];
    std::vector<double> flat;
    flat.reserve(layer.head_count() * layer.rows() * layer.cols());
    for (const auto& h : layer.heads) flat.insert(flat.end(), h.data().begin(), h.data().end());
    const std::string file = layer_file("attention_layer", l, ".npy");
    save_tensor(Tensor::from_doubles({layer.head_count(), layer.rows(), layer.cols()}, flat),
                dir / file);
    layers.push_back({{"file", file},
                      {"grid_n", layer.grid_n},
                      {"reduction_r", layer.reduction_r}});
  }
  manifest["layers"] = std::move(layers);
  write_json(manifest, dir / "manifest.json");
}

AttentionStack load_attention(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  AttentionStack stack;
  try {
    stack.has_class_token = manifest.at("has_class_token").get<bool>();
    for (const auto& entry : manifest.at("layers")) {
      const Tensor t = load_tensor(dir / entry.at("file").get<std::string>());
      if (t.ndim() != 3) throw ShapeError("attention dump must be (m, R, T)");
      const std::size_t m = t.shape()[0], rows = t.shape()[1], cols = t.shape()[2];
      const auto values = t.to_doubles();
      LayerAttention layer;
      layer.grid_n = entry.at("grid_n").get<std::size_t>();
      layer.reduction_r = entry.value("reduction_r", std::size_t{1});
      for (std::size_t h = 0; h < m; ++h) {
        auto first = values.begin() + static_cast<std::ptrdiff_t>(h * rows * cols);
        layer.heads.emplace_back(
            rows, cols,
            std::vector<double>(first, first + static_cast<std::ptrdiff_t>(rows * cols)));
      }
      stack.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("attention manifest: " + std::string(e.what()));
  }
  // float32 storage perturbs row sums by a few ulps of 1.
  stack.validate(1e-5);
  return stack;
}

}  // namespace attentropy
