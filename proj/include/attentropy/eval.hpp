#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "attentropy/entropy.hpp"
#include "attentropy/tensor.hpp"

namespace attentropy {

struct PRPoint {
  double threshold = 0.0;
  double precision = 1.0;
  double recall = 0.0;
  double fpr = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
};

// One point per distinct score, in descending threshold order, so recall is
// non-decreasing along `points`.
struct PRCurve {
  std::vector<PRPoint> points;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

// Labels are BinaryMask values; 255 entries are skipped. Throws DomainError
// when no positive label is present.
PRCurve pr_curve(std::span<const double> scores, std::span<const std::uint8_t> labels);
PRCurve pr_curve(const ScoreMap& scores, const BinaryMask& gt);

// Step-wise sum of (recall_k - recall_{k-1}) * precision_k.
double average_precision(const PRCurve& curve);

// Smallest FPR among points whose recall reaches `target`.
double fpr_at_tpr(const PRCurve& curve, double target = 0.95);

struct SegmentSet {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint32_t> labels;  // 0 = none, else 1..count
  std::vector<std::vector<std::size_t>> components;  // pixel indices per id - 1

  std::size_t count() const { return components.size(); }
};

// Maximal 8-connected components of object pixels, ids in raster order of
// each component's first pixel.
SegmentSet connected_components(const BinaryMask& mask);

struct ThresholdSegments {
  double threshold = 0.0;
  std::vector<double> siou;  // per gt segment
  std::vector<double> ppv;   // per predicted segment
  std::size_t tp = 0;
  std::size_t fn = 0;
  std::size_t fp = 0;

  // Null when there is nothing to detect and nothing predicted.
  std::optional<double> f1() const;
};

struct SegmentOptions {
  double tau_match = 0.5;
};

// For each binarisation threshold: predicted components are taken from
// scores >= threshold outside ignore pixels.
//   sIoU(gt_k) = |gt_k & P_k| / |gt_k | P_k|, with P_k the union of the
//     predicted components that overlap gt_k,
//   PPV(pred_k) = |pred_k & G| / |pred_k|, with G the union of gt segments.
// gt_k is a true positive iff sIoU >= tau_match; pred_k is a false positive
// iff PPV < tau_match.
std::vector<ThresholdSegments> segment_metrics(const ScoreMap& scores,
                                               const SegmentSet& gt_instances,
                                               const BinaryMask& gt_mask,
                                               std::span<const double> thresholds,
                                               const SegmentOptions& options = {});

enum class ScoreNormalization { kNone, kMinMax };

struct EvalOptions {
  std::vector<double> thresholds = default_thresholds();
  double tau_match = 0.5;
  double tpr_target = 0.95;
  // Segment thresholds apply to scores rescaled to [0, 1] using the pooled
  // min and max over non-ignore pixels. Pixel metrics never use it.
  ScoreNormalization normalization = ScoreNormalization::kMinMax;

  // {0.25, 0.30, ..., 0.75}
  static std::vector<double> default_thresholds();
};

struct ThresholdSummary {
  double threshold = 0.0;
  std::size_t tp = 0;
  std::size_t fn = 0;
  std::size_t fp = 0;
  std::optional<double> f1;
  std::optional<double> siou_mean;
  std::optional<double> ppv_mean;
};

struct MetricsReport {
  double ap = 0.0;
  double fpr95 = 0.0;
  std::optional<double> siou_bar;
  std::optional<double> ppv_bar;
  std::optional<double> f1_bar;
  std::vector<ThresholdSummary> per_threshold;
  std::size_t frames = 0;
  EvalOptions options;
};

struct EvalFrame {
  ScoreMap scores;
  BinaryMask gt;
};

// Pixel metrics pool all frames; segment counts are summed per threshold
// across frames. Throws DomainError without frames or without positives.
MetricsReport evaluate(std::span<const EvalFrame> frames, const EvalOptions& options = {});

nlohmann::json report_to_json(const MetricsReport& report);
std::string report_csv_header();
std::string report_csv_row(const MetricsReport& report);

}  // namespace attentropy
