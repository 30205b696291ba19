#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "attentropy/entropy.hpp"
#include "attentropy/error.hpp"
#include "attentropy/json_io.hpp"
#include "attentropy/vit.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace attentropy;
using attentropy::testing::TempDir;

namespace {

VitConfig small_config() {
  VitConfig c;
  c.patch_size = 4;
  c.grid_n = 3;
  c.channels = 8;
  c.heads = 2;
  c.layers = 3;
  return c;
}

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (auto& v : m.data()) v = n(rng);
  return m;
}

GrayImage random_image(std::mt19937_64& rng, std::size_t side) {
  GrayImage img(side, side);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng());
  return img;
}

void check_rows_stochastic(const Matrix& a, double tol) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double s = 0;
    for (double v : a.row(r)) {
      REQUIRE(v >= 0.0);
      s += v;
    }
    REQUIRE(std::abs(s - 1.0) <= tol);
  }
}

}  // namespace

TEST_CASE("init_model is deterministic per seed") {
  const auto c = small_config();
  const auto a = init_model(c, 1), b = init_model(c, 1), other = init_model(c, 2);
  CHECK(a.patch_embed == b.patch_embed);
  CHECK(a.layers[2].mlp_w2 == b.layers[2].mlp_w2);
  CHECK(a.patch_embed != other.patch_embed);
  CHECK(a.layers[0].w_q != other.layers[0].w_q);
  a.check(c);
}

TEST_CASE("init_model weight scale is 1/sqrt(C)") {
  VitConfig c;
  c.patch_size = 8;
  c.grid_n = 4;
  c.channels = 16;
  c.heads = 4;
  const auto w = init_model(c, 3);
  double sum = 0, sq = 0;
  for (double v : w.patch_embed.data()) {
    sum += v;
    sq += v * v;
    CHECK(static_cast<double>(static_cast<float>(v)) == v);
  }
  const double n = static_cast<double>(w.patch_embed.data().size());
  CHECK(std::abs(sum / n) < 0.02);
  CHECK(std::sqrt(sq / n) == doctest::Approx(0.25).epsilon(0.05));
}

TEST_CASE("invalid configs are rejected") {
  VitConfig c = small_config();
  c.channels = 8;
  c.heads = 3;
  try {
    init_model(c, 0);
    FAIL("no throw");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("C not divisible by m") != std::string::npos);
  }
  c = small_config();
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.grid_n = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("patchify geometry") {
  VitConfig c;
  c.patch_size = 16;
  c.grid_n = 2;
  c.channels = 4;
  SUBCASE("32x32 image gives 4 rows of 256") {
    std::mt19937_64 rng(1);
    const auto img = random_image(rng, 32);
    const Matrix p = patchify(img, c);
    CHECK(p.rows() == 4);
    CHECK(p.cols() == 256);
    // Row 1 is the top-right patch; its first entry is pixel (16, 0).
    CHECK(p(1, 0) == img.at(16, 0) / 255.0);
    CHECK(p(2, 17) == img.at(1, 17) / 255.0);
  }
  SUBCASE("constant image gives identical rows") {
    const Matrix p = patchify(GrayImage(32, 32, 77), c);
    for (std::size_t r = 1; r < 4; ++r)
      for (std::size_t k = 0; k < 256; ++k) REQUIRE(p(r, k) == p(0, k));
  }
  SUBCASE("class token row is prepended as zeros") {
    c.use_class_token = true;
    const Matrix p = patchify(GrayImage(32, 32, 200), c);
    CHECK(p.rows() == 5);
    for (double v : p.row(0)) CHECK(v == 0.0);
    CHECK(p(1, 0) == 200 / 255.0);
  }
  SUBCASE("dimension mismatch") { CHECK_THROWS_AS(patchify(GrayImage(31, 32), c), ShapeError); }
}

TEST_CASE("attention_forward special cases") {
  std::mt19937_64 rng(5);
  VitConfig c = small_config();
  auto w = init_model(c, 11);
  SUBCASE("zero query/key weights give uniform rows") {
    w.layers[0].w_q = Matrix(8, 8);
    w.layers[0].w_k = Matrix(8, 8);
    const Matrix z = random_matrix(rng, 9, 8);
    const auto out = attention_forward(z, w.layers[0], c);
    REQUIRE(out.attention.size() == 2);
    for (const auto& a : out.attention)
      for (double v : a.data()) CHECK(v == doctest::Approx(1.0 / 9).epsilon(1e-15));
  }
  SUBCASE("single token attends to itself") {
    const Matrix z = random_matrix(rng, 1, 8);
    const auto out = attention_forward(z, w.layers[0], c);
    for (const auto& a : out.attention) {
      CHECK(a.rows() == 1);
      CHECK(a(0, 0) == 1.0);
    }
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(attention_forward(random_matrix(rng, 4, 7), w.layers[0], c), ShapeError);
  }
}

TEST_CASE("attention_forward matches the naive oracle (seed 7, T=5, C=4, m=2)") {
  std::mt19937_64 rng(7);
  VitConfig c;
  c.channels = 4;
  c.heads = 2;
  const auto w = init_model(c, 7);
  const Matrix z = random_matrix(rng, 5, 4);
  const auto out = attention_forward(z, w.layers[0], c);
  const auto ref = oracle::naive_attention(z, w.layers[0].w_q, w.layers[0].w_k, 2);
  for (std::size_t h = 0; h < 2; ++h) {
    check_rows_stochastic(out.attention[h], 1e-9);
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t jp = 0; jp < 5; ++jp)
        CHECK(std::abs(out.attention[h](j, jp) - ref[h][j][jp]) <= 1e-9);
  }
  // SA_i = A_i (Z W_V,i), checked for head 1, column 0.
  for (std::size_t j = 0; j < 5; ++j) {
    double expect = 0;
    for (std::size_t jp = 0; jp < 5; ++jp) {
      double v = 0;
      for (std::size_t k = 0; k < 4; ++k) v += z(jp, k) * w.layers[0].w_v(k, 2);
      expect += ref[1][j][jp] * v;
    }
    CHECK(out.sa_concat(j, 2) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("property: attention_forward agrees with the oracle for T <= 16") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    VitConfig c;
    c.heads = 1 + rng() % 4;
    c.channels = c.heads * (1 + rng() % 3);
    const std::size_t T = 1 + rng() % 16;
    const auto w = init_model(c, rng());
    const Matrix z = random_matrix(rng, T, c.channels, 2.0);
    const auto out = attention_forward(z, w.layers[0], c, 2);
    const auto ref = oracle::naive_attention(z, w.layers[0].w_q, w.layers[0].w_k, c.heads);
    for (std::size_t h = 0; h < c.heads; ++h) {
      check_rows_stochastic(out.attention[h], 1e-6);
      for (std::size_t j = 0; j < T; ++j)
        for (std::size_t jp = 0; jp < T; ++jp)
          REQUIRE(std::abs(out.attention[h](j, jp) - ref[h][j][jp]) <= 1e-9);
    }
  }
}

TEST_CASE("msa_block") {
  SUBCASE("all-zero weights give a zero output") {
    VitConfig c = small_config();
    LayerWeights zero{Matrix(8, 8), Matrix(8, 8),  Matrix(8, 8),  Matrix(8, 8),
                      Matrix(8, 32), Matrix(1, 32), Matrix(32, 8), Matrix(1, 8)};
    std::mt19937_64 rng(1);
    const auto out = msa_block(random_matrix(rng, 9, 8), zero, c);
    for (double v : out.z_next.data()) CHECK(v == 0.0);
    for (const auto& a : out.attention) check_rows_stochastic(a, 1e-12);
  }
  SUBCASE("scalar recurrence for C = m = T = 1") {
    // z = 1, w_v = 2, w_o = 0.5: SA = 2, MSA = 2 + 2 * 0.5 = 3.
    // hidden = max(0, 3 * [1, -1, 0.5, 0] + [0, 0, 0, 1]) = [3, 0, 1.5, 1]
    // MLP = 3*1 + 0*1 + 1.5*2 + 1*3 + 0.25 = 9.25; Z' = 3 + 9.25 = 12.25.
    VitConfig c;
    LayerWeights w{Matrix(1, 1, {0.3}),
                   Matrix(1, 1, {-0.7}),
                   Matrix(1, 1, {2.0}),
                   Matrix(1, 1, {0.5}),
                   Matrix(1, 4, {1.0, -1.0, 0.5, 0.0}),
                   Matrix(1, 4, {0.0, 0.0, 0.0, 1.0}),
                   Matrix(4, 1, {1.0, 1.0, 2.0, 3.0}),
                   Matrix(1, 1, {0.25})};
    const auto out = msa_block(Matrix(1, 1, {1.0}), w, c);
    CHECK(out.attention[0](0, 0) == 1.0);
    CHECK(out.z_next(0, 0) == doctest::Approx(12.25).epsilon(1e-15));
  }
  SUBCASE("random instance stays finite and stochastic") {
    VitConfig c = small_config();
    const auto w = init_model(c, 21);
    std::mt19937_64 rng(2);
    const auto out = msa_block(random_matrix(rng, 9, 8), w.layers[1], c);
    for (double v : out.z_next.data()) CHECK(std::isfinite(v));
    for (const auto& a : out.attention) check_rows_stochastic(a, 1e-9);
  }
}

TEST_CASE("vit_forward") {
  VitConfig c = small_config();
  std::mt19937_64 rng(4);
  const auto img = random_image(rng, c.image_size());
  SUBCASE("L=1 equals one attention_forward on Z^0") {
    c.layers = 1;
    const auto w = init_model(c, 8);
    const auto stack = vit_forward(img, w, c);
    const auto direct = attention_forward(embed(img, w, c), w.layers[0], c);
    REQUIRE(stack.layers.size() == 1);
    for (std::size_t h = 0; h < c.heads; ++h) CHECK(stack.layers[0].heads[h] == direct.attention[h]);
  }
  SUBCASE("L=3 is deterministic and thread-count independent") {
    const auto w = init_model(c, 8);
    const auto a = vit_forward(img, w, c, 1);
    const auto b = vit_forward(img, w, c, 4);
    REQUIRE(a.layers.size() == 3);
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t h = 0; h < c.heads; ++h) CHECK(a.layers[l].heads[h] == b.layers[l].heads[h]);
    a.validate();
  }
  SUBCASE("uniform gray with zero Q/K gives ln T entropy everywhere") {
    c.use_class_token = true;
    const auto w = init_model(c, 8, {.zero_qk = true});
    const auto stack = vit_forward(GrayImage(c.image_size(), c.image_size(), 128), w, c);
    for (const auto& layer : stack.layers)
      for (const auto& h : layer.heads)
        for (double v : h.data()) CHECK(v == doctest::Approx(1.0 / 10).epsilon(1e-14));
    for (const auto& map : layer_entropy_maps(stack))
      for (double e : map.values()) CHECK(std::abs(e - std::log(9.0)) <= 1e-9);
  }
}

TEST_CASE("property: patch permutation permutes attention rows and columns") {
  VitConfig c;
  c.patch_size = 2;
  c.grid_n = 3;
  c.channels = 6;
  c.heads = 3;
  c.layers = 3;
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const auto w = init_model(c, rng());
    const auto img = random_image(rng, 6);
    std::vector<std::size_t> perm(9);  // new position k holds old patch perm[k]
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    GrayImage permuted(6, 6);
    auto w2 = w;
    for (std::size_t k = 0; k < 9; ++k) {
      const std::size_t src = perm[k];
      for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x)
          permuted.at((k % 3) * 2 + x, (k / 3) * 2 + y) =
              img.at((src % 3) * 2 + x, (src / 3) * 2 + y);
      for (std::size_t ch = 0; ch < 6; ++ch) w2.pos_embed(k, ch) = w.pos_embed(src, ch);
    }
    const auto a = vit_forward(img, w, c);
    const auto b = vit_forward(permuted, w2, c);
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t i = 0; i < 9; ++i)
          for (std::size_t j = 0; j < 9; ++j)
            REQUIRE(std::abs(b.layers[l].heads[h](i, j) - a.layers[l].heads[h](perm[i], perm[j])) <=
                    1e-12);
  }
}

TEST_CASE("model persistence") {
  TempDir dir;
  VitConfig c = small_config();
  c.use_class_token = true;
  const auto w = init_model(c, 5);
  save_model(c, w, 5, dir.path());
  const auto loaded = load_model(dir.path());
  CHECK(loaded.config == c);
  CHECK(loaded.weights.patch_embed == w.patch_embed);
  CHECK(loaded.weights.pos_embed == w.pos_embed);
  for (std::size_t l = 0; l < c.layers; ++l) {
    CHECK(loaded.weights.layers[l].w_o == w.layers[l].w_o);
    CHECK(loaded.weights.layers[l].mlp_b1 == w.layers[l].mlp_b1);
  }
  const auto cfg = read_json(dir / "config.json");
  CHECK(cfg.size() == 6);
  for (const char* key : {"patch_size", "grid_n", "channels", "heads", "layers", "use_class_token"})
    CHECK(cfg.contains(key));
  const auto manifest = read_json(dir / "manifest.json");
  CHECK(manifest["layers"].size() == 3);
}

TEST_CASE("config JSON rejects unknown or missing keys") {
  TempDir dir;
  write_json({{"patch_size", 16}, {"grid_n", 2}, {"channels", 4}, {"heads", 2}, {"layers", 1}},
             dir / "c.json");
  CHECK_THROWS_AS(load_config(dir / "c.json"), ConfigError);
  write_json({{"patch_size", 16}, {"grid_n", 2}, {"channels", 4}, {"heads", 2}, {"layers", 1},
              {"use_class_token", false}, {"extra", 1}},
             dir / "c.json");
  CHECK_THROWS_AS(load_config(dir / "c.json"), ConfigError);
}

TEST_CASE("attention dump round trip") {
  TempDir dir;
  VitConfig c = small_config();
  const auto w = init_model(c, 9);
  std::mt19937_64 rng(3);
  const auto stack = vit_forward(random_image(rng, c.image_size()), w, c);
  save_attention(stack, dir.path());
  const auto back = load_attention(dir.path());
  REQUIRE(back.layers.size() == stack.layers.size());
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    CHECK(back.layers[l].grid_n == 3);
    for (std::size_t h = 0; h < c.heads; ++h) {
      const auto a = stack.layers[l].heads[h].data();
      const auto b = back.layers[l].heads[h].data();
      for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(b[i] == static_cast<float>(a[i]));
    }
  }
}

TEST_CASE("AttentionStack::validate catches bad bookkeeping") {
  AttentionStack s;
  LayerAttention layer;
  layer.grid_n = 2;
  layer.heads.push_back(Matrix(4, 4, 0.25));
  s.layers.push_back(layer);
  s.validate();
  s.layers[0].reduction_r = 2;
  CHECK_THROWS_AS(s.validate(), ShapeError);
  s.layers[0].heads[0] = Matrix(2, 4, 0.25);
  s.validate();
  s.layers[0].heads[0](0, 0) = 0.5;
  CHECK_THROWS_AS(s.validate(), DomainError);
}
