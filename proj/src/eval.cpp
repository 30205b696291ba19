#include "attentropy/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "attentropy/error.hpp"

namespace attentropy {
namespace {

double mean_or(const std::vector<double>& v, std::optional<double>& out) {
  if (v.empty()) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  out = m;
  return m;
}

nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::string csv_value(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

}  // namespace

PRCurve pr_curve(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size())
    throw ShapeError("pr_curve: score and label counts differ");
  std::vector<std::size_t> order;
  order.reserve(scores.size());
  PRCurve curve;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto y = labels[i];
    if (y == BinaryMask::kIgnore) continue;
    if (y != BinaryMask::kObject && y != BinaryMask::kBackground)
      throw DomainError("pr_curve: illegal label " + std::to_string(y));
    if (std::isnan(scores[i])) throw DomainError("pr_curve: NaN score");
    order.push_back(i);
    (y == BinaryMask::kObject ? curve.positives : curve.negatives)++;
  }
  if (curve.positives == 0) throw DomainError("pr_curve: ground truth has no positives");
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });

  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t i = order[k];
    (labels[i] == BinaryMask::kObject ? tp : fp)++;
    const bool last_of_tie = k + 1 == order.size() || scores[order[k + 1]] != scores[i];
    if (!last_of_tie) continue;
    PRPoint p;
    p.threshold = scores[i];
    p.tp = tp;
    p.fp = fp;
    p.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    p.recall = static_cast<double>(tp) / static_cast<double>(curve.positives);
    p.fpr = curve.negatives == 0
                ? 0.0
                : static_cast<double>(fp) / static_cast<double>(curve.negatives);
    curve.points.push_back(p);
  }
  return curve;
}

PRCurve pr_curve(const ScoreMap& scores, const BinaryMask& gt) {
  if (scores.width() != gt.width() || scores.height() != gt.height())
    throw ShapeError("pr_curve: score map and mask sizes differ");
  return pr_curve(scores.values(), gt.values());
}

double average_precision(const PRCurve& curve) {
  if (curve.points.empty()) throw DomainError("average_precision: empty curve");
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& p : curve.points) {
    ap += (p.recall - prev_recall) * p.precision;
    prev_recall = p.recall;
  }
  return ap;
}

double fpr_at_tpr(const PRCurve& curve, double target) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : curve.points)
    if (p.recall >= target) best = std::min(best, p.fpr);
  if (std::isinf(best))
    throw DomainError("fpr_at_tpr: recall " + std::to_string(target) + " is unreachable");
  return best;
}

SegmentSet connected_components(const BinaryMask& mask) {
  SegmentSet set;
  set.width = mask.width();
  set.height = mask.height();
  set.labels.assign(set.width * set.height, 0);
  std::vector<std::size_t> stack;
  const auto w = static_cast<std::ptrdiff_t>(set.width);
  const auto h = static_cast<std::ptrdiff_t>(set.height);
  for (std::size_t start = 0; start < set.labels.size(); ++start) {
    if (mask.values()[start] != BinaryMask::kObject || set.labels[start] != 0) continue;
    const auto id = static_cast<std::uint32_t>(set.components.size() + 1);
    std::vector<std::size_t> pixels;
    set.labels[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      pixels.push_back(p);
      const auto px = static_cast<std::ptrdiff_t>(p) % w;
      const auto py = static_cast<std::ptrdiff_t>(p) / w;
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
          const auto nx = px + dx, ny = py + dy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const auto q = static_cast<std::size_t>(ny * w + nx);
          if (mask.values()[q] == BinaryMask::kObject && set.labels[q] == 0) {
            set.labels[q] = id;
            stack.push_back(q);
          }
        }
    }
    std::sort(pixels.begin(), pixels.end());
    set.components.push_back(std::move(pixels));
  }
  return set;
}

std::optional<double> ThresholdSegments::f1() const {
  const std::size_t denom = 2 * tp + fn + fp;
  if (denom == 0) return std::nullopt;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

std::vector<ThresholdSegments> segment_metrics(const ScoreMap& scores,
                                               const SegmentSet& gt_instances,
                                               const BinaryMask& gt_mask,
                                               std::span<const double> thresholds,
                                               const SegmentOptions& options) {
  if (thresholds.empty()) throw ConfigError("segment_metrics: no thresholds");
  if (scores.width() != gt_mask.width() || scores.height() != gt_mask.height() ||
      gt_instances.width != gt_mask.width() || gt_instances.height != gt_mask.height())
    throw ShapeError("segment_metrics: size mismatch");

  const auto gt = gt_mask.values();
  std::vector<std::uint8_t> gt_union(gt.size(), 0);
  for (const auto& comp : gt_instances.components)
    for (auto p : comp) gt_union[p] = 1;

  std::vector<ThresholdSegments> out;
  for (double t : thresholds) {
    std::vector<std::uint8_t> pred(gt.size());
    auto s = scores.values();
    for (std::size_t i = 0; i < pred.size(); ++i)
      pred[i] = (s[i] >= t && gt[i] != BinaryMask::kIgnore) ? BinaryMask::kObject
                                                            : BinaryMask::kBackground;
    const BinaryMask pred_mask(gt_mask.width(), gt_mask.height(), pred);
    const SegmentSet pred_set = connected_components(pred_mask);

    ThresholdSegments r;
    r.threshold = t;
    std::vector<std::uint32_t> touching;
    for (const auto& comp : gt_instances.components) {
      std::size_t inter = 0;
      touching.clear();
      for (auto p : comp) {
        inter += pred[p];
        if (pred_set.labels[p] != 0) touching.push_back(pred_set.labels[p]);
      }
      std::sort(touching.begin(), touching.end());
      touching.erase(std::unique(touching.begin(), touching.end()), touching.end());
      std::size_t pred_k = 0;
      for (auto id : touching) pred_k += pred_set.components[id - 1].size();
      // |gt_k u P_k| = |gt_k| + |P_k| - |gt_k n P_k|
      const std::size_t uni = comp.size() + pred_k - inter;
      const double siou = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
      r.siou.push_back(siou);
      (siou >= options.tau_match ? r.tp : r.fn)++;
    }
    for (const auto& comp : pred_set.components) {
      std::size_t inter = 0;
      for (auto p : comp) inter += gt_union[p];
      const double ppv = static_cast<double>(inter) / static_cast<double>(comp.size());
      r.ppv.push_back(ppv);
      if (ppv < options.tau_match) ++r.fp;
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<double> EvalOptions::default_thresholds() {
  std::vector<double> t;
  for (int k = 25; k <= 75; k += 5) t.push_back(k / 100.0);
  return t;
}

MetricsReport evaluate(std::span<const EvalFrame> frames, const EvalOptions& options) {
  if (frames.empty()) throw DomainError("evaluate: no frames");
  if (options.thresholds.empty()) throw ConfigError("evaluate: no thresholds");

  std::vector<double> pooled_scores;
  std::vector<std::uint8_t> pooled_labels;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& f : frames) {
    if (f.scores.width() != f.gt.width() || f.scores.height() != f.gt.height())
      throw ShapeError("evaluate: score map and mask sizes differ");
    auto s = f.scores.values();
    auto g = f.gt.values();
    pooled_scores.insert(pooled_scores.end(), s.begin(), s.end());
    pooled_labels.insert(pooled_labels.end(), g.begin(), g.end());
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (g[i] == BinaryMask::kIgnore) continue;
      lo = std::min(lo, s[i]);
      hi = std::max(hi, s[i]);
    }
  }

  MetricsReport report;
  report.frames = frames.size();
  report.options = options;
  const PRCurve curve = pr_curve(pooled_scores, pooled_labels);
  report.ap = average_precision(curve);
  report.fpr95 = fpr_at_tpr(curve, options.tpr_target);

  std::vector<ThresholdSummary> summaries(options.thresholds.size());
  std::vector<std::vector<double>> siou(options.thresholds.size());
  std::vector<std::vector<double>> ppv(options.thresholds.size());
  for (const auto& f : frames) {
    std::vector<double> norm(f.scores.values().begin(), f.scores.values().end());
    if (options.normalization == ScoreNormalization::kMinMax) {
      // A constant score field maps to 1 so that every pixel is predicted,
      // matching the single all-positive point of its PR curve.
      for (auto& v : norm) v = hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 1.0;
    }
    const ScoreMap scores(f.scores.width(), f.scores.height(), std::move(norm));
    const auto per = segment_metrics(scores, connected_components(f.gt), f.gt,
                                     options.thresholds, {options.tau_match});
    for (std::size_t k = 0; k < per.size(); ++k) {
      summaries[k].tp += per[k].tp;
      summaries[k].fn += per[k].fn;
      summaries[k].fp += per[k].fp;
      siou[k].insert(siou[k].end(), per[k].siou.begin(), per[k].siou.end());
      ppv[k].insert(ppv[k].end(), per[k].ppv.begin(), per[k].ppv.end());
    }
  }

  std::vector<double> all_siou, all_ppv, all_f1;
  for (std::size_t k = 0; k < summaries.size(); ++k) {
    auto& s = summaries[k];
    s.threshold = options.thresholds[k];
    ThresholdSegments counts;
    counts.tp = s.tp;
    counts.fn = s.fn;
    counts.fp = s.fp;
    s.f1 = counts.f1();
    if (s.f1) all_f1.push_back(*s.f1);
    mean_or(siou[k], s.siou_mean);
    mean_or(ppv[k], s.ppv_mean);
    all_siou.insert(all_siou.end(), siou[k].begin(), siou[k].end());
    all_ppv.insert(all_ppv.end(), ppv[k].begin(), ppv[k].end());
  }
  report.per_threshold = std::move(summaries);
  mean_or(all_siou, report.siou_bar);
  mean_or(all_ppv, report.ppv_bar);
  mean_or(all_f1, report.f1_bar);
  return report;
}

nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : report.per_threshold)
    per.push_back({{"threshold", s.threshold},
                   {"tp", s.tp},
                   {"fn", s.fn},
                   {"fp", s.fp},
                   {"f1", opt(s.f1)},
                   {"siou_mean", opt(s.siou_mean)},
                   {"ppv_mean", opt(s.ppv_mean)}});
  const auto& o = report.options;
  return {{"ap", report.ap},
          {"fpr95", report.fpr95},
          {"siou_bar", opt(report.siou_bar)},
          {"ppv_bar", opt(report.ppv_bar)},
          {"f1_bar", opt(report.f1_bar)},
          {"per_threshold", std::move(per)},
          {"frames", report.frames},
          {"metadata",
           {{"segment_metric_definitions",
             "stand-in: sIoU = |gt_k & P| / |gt_k | P| over the union P of "
             "predictions; PPV = |pred_k & G| / |pred_k|; match at tau"},
            {"tau_match", o.tau_match},
            {"tpr_target", o.tpr_target},
            {"score_normalization",
             o.normalization == ScoreNormalization::kMinMax ? "minmax" : "none"},
            {"connectivity", 8},
            {"ap_summation", "step-wise, non-interpolated"}}}};
}

std::string report_csv_header() { return "ap,fpr95,siou_bar,ppv_bar,f1_bar,frames"; }

std::string report_csv_row(const MetricsReport& report) {
  return csv_value(report.ap) + "," + csv_value(report.fpr95) + "," +
         csv_value(report.siou_bar) + "," + csv_value(report.ppv_bar) + "," +
         csv_value(report.f1_bar) + "," + std::to_string(report.frames);
}

}  // namespace attentropy
