// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "attentropy/cli.hpp"
#include "attentropy/entropy.hpp"
#include "attentropy/error.hpp"
#include "attentropy/eval.hpp"
#include "attentropy/layer_selection.hpp"
#include "attentropy/vit.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace attentropy;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2e", v);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// 1. Entropy kernel against direct summation.
Outcome entropy_kernel() {
  Stopwatch clock;
  std::mt19937_64 rng(101);
  double worst = 0.0;
  bool ok = true;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t T = 2 + rng() % 511;
    const auto p = testing::random_distribution(rng, T, i % 4 == 0 ? 0.3 : 0.0);
    Matrix row(1, T, p);
    const double h = row_entropy(row)[0];
    worst = std::max(worst, std::abs(h - oracle::direct_entropy(p)));
    ok &= h >= 0.0 && h <= std::log(static_cast<double>(T)) + 1e-12;

    const double uniform = row_entropy(Matrix(1, T, 1.0 / static_cast<double>(T)))[0];
    ok &= std::abs(uniform - std::log(static_cast<double>(T))) <= 1e-12;
    Matrix one_hot(1, T, 0.0);
    one_hot(0, rng() % T) = 1.0;
    ok &= row_entropy(one_hot)[0] == 0.0;
  }
  const double secs = clock.seconds();
  ok &= worst <= 1e-12 && secs < 5.0;
  return {ok, "1000 rows, max |H - oracle| " + sci(worst) + ", " + fixed(secs, 3) + " s"};
}

// 2. Attention forward against the naive reimplementation.
Outcome attention_oracle() {
  std::mt19937_64 rng(202);
  double worst = 0.0, worst_row = 0.0;
  for (int i = 0; i < 50; ++i) {
    VitConfig c;
    c.heads = 1 + rng() % 4;
    c.channels = c.heads * (1 + rng() % (8 / c.heads));
    const std::size_t T = 1 + rng() % 16;
    const auto w = init_model(c, rng());
    std::normal_distribution<double> g(0.0, 1.5);
    Matrix z(T, c.channels);
    for (auto& v : z.data()) v = g(rng);
    const auto out = attention_forward(z, w.layers[0], c);
    const auto ref = oracle::naive_attention(z, w.layers[0].w_q, w.layers[0].w_k, c.heads);
    for (std::size_t h = 0; h < c.heads; ++h)
      for (std::size_t j = 0; j < T; ++j) {
        double sum = 0.0;
        for (std::size_t k = 0; k < T; ++k) {
          worst = std::max(worst, std::abs(out.attention[h](j, k) - ref[h][j][k]));
          sum += out.attention[h](j, k);
        }
        worst_row = std::max(worst_row, std::abs(sum - 1.0));
      }
  }
  return {worst <= 1e-9 && worst_row <= 1e-6,
          "50 instances, max |A - naive| " + sci(worst) + ", max |row sum - 1| " + sci(worst_row)};
}

// 3. Zero query/key weights: flat ln T maps and the all-layers fallback.
Outcome zero_qk() {
  std::mt19937_64 rng(303);
  double worst = 0.0;
  bool fallback = true;
  for (bool cls : {false, true}) {
    VitConfig c;
    c.patch_size = 8;
    c.grid_n = 6;
    c.channels = 12;
    c.heads = 3;
    c.layers = 4;
    c.use_class_token = cls;
    const auto w = init_model(c, 9, {.zero_qk = true});
    for (int img_i = 0; img_i < 3; ++img_i) {
      GrayImage img(c.image_size(), c.image_size());
      for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng());
      for (const auto& m : layer_entropy_maps(vit_forward(img, w, c)))
        for (double v : m.values()) worst = std::max(worst, std::abs(v - std::log(36.0)));
    }
    const auto r = auto_select(w, c);
    fallback &= r.fallback_used && r.aggregation == LayerAggregation::all_layers(4);
  }
  return {worst <= 1e-9 && fallback,
          "max |E - ln T| " + sci(worst) + (fallback ? ", fallback to all layers" : ", no fallback")};
}

// 4. Planted object, full pipeline.
Outcome planted_object() {
  Stopwatch clock;
  const std::size_t n = 16, T = n * n, patch = 16, L = 6;
  const std::vector<std::size_t> planted{1, 4};
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  BinaryMask grid(n, n);
  for (std::size_t y = 6; y < 9; ++y)
    for (std::size_t x = 6; x < 9; ++x) grid.set(x, y, 1);
  BinaryMask pixels(n * patch, n * patch);
  for (std::size_t y = 0; y < n * patch; ++y)
    for (std::size_t x = 0; x < n * patch; ++x) pixels.set(x, y, grid.at(x / patch, y / patch));

  AttentionStack stack;
  for (std::size_t l = 0; l < L; ++l) {
    LayerAttention layer;
    layer.grid_n = n;
    const bool contrast = std::find(planted.begin(), planted.end(), l) != planted.end();
    for (int h = 0; h < 2; ++h) {
      Matrix a(T, T);
      for (std::size_t j = 0; j < T; ++j) {
        auto row = a.row(j);
        double sum = 0.0;
        if (contrast && grid.values()[j] == 1) {
          for (auto& v : row) v = 0.02 * u(rng) / static_cast<double>(T);
          row[j] = 1.0;  // near-one-hot on itself
        } else {
          for (auto& v : row) v = 1.0 + 0.2 * (u(rng) - 0.5);
        }
        for (double v : row) sum += v;
        for (auto& v : row) v /= sum;
      }
      layer.heads.push_back(std::move(a));
    }
    stack.layers.push_back(std::move(layer));
  }
  stack.validate();

  const auto report = select_from_stack(stack, pixels, 1.2);
  const auto maps = layer_entropy_maps(stack);
  const auto [gw, gh] = finest_grid(maps);
  const auto combined = aggregate_layers(maps, report.aggregation, gw, gh);
  const auto scores = to_score(combined, n * patch, n * patch, false);
  const double ap = average_precision(pr_curve(scores, pixels));
  const double secs = clock.seconds();

  std::string sel;
  for (auto l : report.selected) sel += (sel.empty() ? "" : ",") + std::to_string(l);
  const bool ok = ap >= 0.99 && report.selected == planted && secs < 10.0;
  return {ok, "AP " + fixed(ap) + ", selected {" + sel + "} (planted {1,4}), " + fixed(secs, 3) + " s"};
}

// 5. AP / FPR95 against exhaustive threshold enumeration, and rank invariance.
Outcome pixel_metrics() {
  std::mt19937_64 rng(505);
  double worst_ap = 0.0, worst_fpr = 0.0;
  bool invariant = true;
  const std::vector<std::function<double(double)>> transforms{
      [](double v) { return 3.0 * v + 1.0; },
      [](double v) { return v * v * v + 2.0 * v; },
      [](double v) { return std::exp(v); },
      [](double v) { return std::log1p(v) + v; }};
  for (int i = 0; i < 200; ++i) {
    const std::size_t N = 2 + rng() % 9999;
    std::vector<double> s(N);
    std::vector<std::uint8_t> y(N);
    // Dyadic levels keep transformed values distinct.
    const unsigned levels = i % 4 == 0 ? 16 : (1u << 20);
    for (std::size_t k = 0; k < N; ++k) {
      s[k] = static_cast<double>(rng() % levels) / static_cast<double>(levels);
      const auto r = rng() % 20;
      y[k] = r == 0 ? 255 : (r < 6 ? 1 : 0);
    }
    y[0] = 1;
    const auto curve = pr_curve(s, y);
    const double ap = average_precision(curve), fpr = fpr_at_tpr(curve);
    const auto bf = oracle::brute_force_pixel_metrics(s, y);
    worst_ap = std::max(worst_ap, std::abs(ap - bf.ap));
    worst_fpr = std::max(worst_fpr, std::abs(fpr - bf.fpr95));
    std::vector<double> t(N);
    const auto& f = transforms[i % transforms.size()];
    for (std::size_t k = 0; k < N; ++k) t[k] = f(s[k]);
    const auto ct = pr_curve(t, y);
    invariant &= average_precision(ct) == ap && fpr_at_tpr(ct) == fpr;
  }
  return {worst_ap <= 1e-12 && worst_fpr <= 1e-12 && invariant,
          "200 instances, max |dAP| " + sci(worst_ap) + ", max |dFPR95| " + sci(worst_fpr) +
              (invariant ? ", rank invariant" : ", rank invariance violated")};
}

// 6. Segment metrics on the hand-enumerated square and on exact predictions.
Outcome segment_metrics_case() {
  // gt: 4x4 square at x,y in [2,5] of a 12x12 frame. Prediction: its left
  // half (8 px) plus a disjoint 2x4 block (8 px).
  //   sIoU = 8 / (16 + 8 - 8) = 0.5 -> TP; PPV = {1, 0} -> one FP; F1 = 2/3.
  std::vector<std::uint8_t> gt(144, 0);
  std::vector<double> s(144, 0.1);
  for (std::size_t y = 2; y <= 5; ++y)
    for (std::size_t x = 2; x <= 5; ++x) gt[y * 12 + x] = 1;
  for (std::size_t y = 2; y <= 5; ++y)
    for (std::size_t x = 2; x <= 3; ++x) s[y * 12 + x] = 0.9;
  for (std::size_t y = 8; y <= 11; ++y)
    for (std::size_t x = 8; x <= 9; ++x) s[y * 12 + x] = 0.9;
  const BinaryMask mask(12, 12, gt);
  const auto thresholds = EvalOptions::default_thresholds();
  bool hand = true;
  for (const auto& t : segment_metrics(ScoreMap(12, 12, s), connected_components(mask), mask, thresholds)) {
    hand &= t.siou == std::vector<double>{0.5} && t.ppv == std::vector<double>{1.0, 0.0};
    hand &= t.tp == 1 && t.fn == 0 && t.fp == 1 && t.f1() && *t.f1() == 2.0 / 3.0;
  }

  // Prediction identical to a three-segment gt.
  std::vector<std::uint8_t> gt2(400, 0);
  for (std::size_t y = 1; y < 5; ++y)
    for (std::size_t x = 1; x < 4; ++x) gt2[y * 20 + x] = 1;
  for (std::size_t y = 10; y < 12; ++y)
    for (std::size_t x = 8; x < 18; ++x) gt2[y * 20 + x] = 1;
  gt2[18 * 20 + 2] = 1;
  const BinaryMask mask2(20, 20, gt2);
  const std::vector<EvalFrame> frames{{ScoreMap(20, 20, std::vector<double>(gt2.begin(), gt2.end())), mask2}};
  const auto report = evaluate(frames);
  bool exact = report.per_threshold.size() == 11;
  for (const auto& t : report.per_threshold)
    exact &= t.siou_mean == 1.0 && t.ppv_mean == 1.0 && t.f1 == 1.0 && t.tp == 3 && t.fp == 0;
  exact &= report.siou_bar == 1.0 && report.ppv_bar == 1.0 && report.f1_bar == 1.0;
  return {hand && exact, std::string("4x4 square case ") + (hand ? "exact" : "MISMATCH") +
                             ", prediction == gt " + (exact ? "gives 1/1/1 at all 11 thresholds" : "MISMATCH")};
}

// 7. Logistic weighting on separable two-layer data, and gradient check.
Outcome logistic() {
  std::mt19937_64 rng(707);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t N = 2000;
  Matrix x(N, 2);
  std::vector<std::uint8_t> y(N);
  for (std::size_t i = 0; i < N; ++i) {
    y[i] = u(rng) < 0.3 ? 1 : 0;
    x(i, 0) = y[i] ? 0.2 + 0.6 * u(rng) : 1.2 + 0.8 * u(rng);  // object entropy lower
    x(i, 1) = 1.0 + u(rng);                                  // uninformative layer
  }
  const auto fit = fit_layer_weights(x, y, {.epochs = 500});
  std::vector<double> scores(N);
  for (std::size_t i = 0; i < N; ++i)
    scores[i] = sigmoid(fit.weights[0] * x(i, 0) + fit.weights[1] * x(i, 1) + fit.bias);
  const double ap = average_precision(pr_curve(scores, y));

  double worst = 0.0;
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix f(40, 5);
    std::vector<std::uint8_t> lab(40);
    for (auto& v : f.data()) v = g(rng);
    for (auto& v : lab) v = rng() % 2;
    std::vector<double> a(5);
    for (auto& v : a) v = g(rng);
    const double b = g(rng), l2 = 0.01, h = 1e-5;
    const auto grad = logistic_gradient(f, lab, a, b, l2);
    for (std::size_t k = 0; k <= 5; ++k) {
      auto ap_ = a, am = a;
      double bp = b, bm = b;
      if (k < 5) {
        ap_[k] += h;
        am[k] -= h;
      } else {
        bp += h;
        bm -= h;
      }
      const double fd = (logistic_loss(f, lab, ap_, bp, l2) - logistic_loss(f, lab, am, bm, l2)) / (2 * h);
      worst = std::max(worst, std::abs(fd - grad[k]) / std::max(1.0, std::abs(grad[k])));
    }
  }
  return {ap >= 0.99 && worst <= 1e-6,
          "training AP " + fixed(ap) + " after 500 epochs, max relative gradient error " + sci(worst)};
}

// 8. Every CLI command twice with the same seed and config; compare artifact hashes.
std::map<std::string, std::size_t> hash_tree(const fs::path& root) {
  std::map<std::string, std::size_t> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto bytes = read_file(e.path());
    out[fs::relative(e.path(), root).string()] =
        std::hash<std::string_view>{}(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  }
  return out;
}

Outcome determinism() {
  testing::TempDir tmp;
  auto pipeline = [&](const fs::path& root) -> std::pair<bool, std::string> {
    const auto p = [&](const char* name) { return (root / name).string(); };
    std::string log;
    const std::vector<std::vector<std::string>> commands{
        {"--seed", "7", "init-model", "--layers", "3", "--heads", "2", "--channels", "8", "--grid", "4", "-o", p("model")},
        {"--seed", "7", "gen-testpattern", "--width", "64", "--height", "64", "-o", p("pattern")},
        {"--seed", "7", "gen-testpattern", "--width", "128", "--height", "64", "-o", p("wide")},
        {"--threads", "2", "extract", "--image", p("pattern/image.pgm"), "--model", p("model"), "--dump-attention", "-o", p("entropy")},
        {"extract", "--image", p("wide/image.pgm"), "--model", p("model"), "-o", p("entropy_wide")},
        {"--seed", "7", "select-layers", "--model", p("model"), "-o", p("selection.json")},
        {"fit-weights", "--entropy", p("entropy"), "--mask", p("pattern/mask.pgm"), "-o", p("weights.json")},
        {"segment", "--image", p("pattern/image.pgm"), "--model", p("model"), "--aggregation", p("selection.json"), "-o", p("segment")},
        {"segment", "--entropy", p("entropy_wide"), "--layers", "0,2", "-o", p("segment_wide")},
        {"export-viz", "--image", p("pattern/image.pgm"), "--attention", p("entropy/attention"), "-o", p("viz")},
        {"validate-viz", "--bundle", p("viz")},
    };
    fs::create_directories(root / "eval_scores");
    fs::create_directories(root / "eval_gt");
    for (const auto& args : commands) {
      std::vector<std::string> full{"attentropy"};
      full.insert(full.end(), args.begin(), args.end());
      std::ostringstream out, err;
      if (cli::run(full, out, err) != 0) return {false, "command failed: " + args[args[0] == "--seed" || args[0] == "--threads" ? 2 : 0] + ": " + err.str()};
      log += out.str();
    }
    fs::copy_file(root / "segment" / "score.npy", root / "eval_scores" / "f.npy");
    fs::copy_file(root / "pattern" / "mask.pgm", root / "eval_gt" / "f.pgm");
    std::ostringstream out, err;
    if (cli::run({"attentropy", "evaluate", "--scores", p("eval_scores"), "--gt", p("eval_gt"), "--csv", p("metrics.csv"), "-o", p("metrics.json")}, out, err) != 0)
      return {false, "evaluate failed: " + err.str()};
    log += out.str();
    // Echoed output paths name the run directory; neutralize it before hashing.
    for (std::size_t pos; (pos = log.find(root.string())) != std::string::npos;)
      log.replace(pos, root.string().size(), "<run>");
    write_file(root / "stdout.txt", std::vector<std::uint8_t>(log.begin(), log.end()));
    return {true, ""};
  };
  for (const char* run : {"a", "b"}) {
    const auto [ok, msg] = pipeline(tmp / run);
    if (!ok) return {false, msg};
  }
  const auto a = hash_tree(tmp / "a"), b = hash_tree(tmp / "b");
  std::size_t differing = 0;
  std::string names;
  for (const auto& [name, h] : a)
    if (!b.count(name) || b.at(name) != h) {
      ++differing;
      names += " " + name;
    }
  differing += a.size() != b.size();
  return {differing == 0 && a.size() > 20, "9 commands, " + std::to_string(a.size()) +
                                               " artifacts hashed, " + std::to_string(differing) + " differ" + names};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"entropy kernel vs direct summation", entropy_kernel},
      {"attention forward vs naive oracle", attention_oracle},
      {"zero-QK model: ln T maps and fallback", zero_qk},
      {"planted object end to end", planted_object},
      {"AP/FPR95 vs exhaustive enumeration", pixel_metrics},
      {"segment metrics", segment_metrics_case},
      {"logistic layer weighting", logistic},
      {"CLI determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << i + 1 << "  " << criteria[i].first
              << "  (" << o.detail << ")\n";
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
