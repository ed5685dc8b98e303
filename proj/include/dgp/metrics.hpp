#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace dgp {

struct Detection {
  int x = 0, y = 0;
  int cls = 0;
  double score = 1.0;
};

struct GtPoint {
  int x = 0, y = 0;
  int cls = 0;
};

struct MatchPair {
  int pred = -1, gt = -1;
  double distance = 0.0;
};

struct MatchReport {
  std::vector<MatchPair> pairs;        // sorted by gt index
  std::vector<int> unmatched_pred;     // FP indices
  std::vector<int> unmatched_gt;       // FN indices
  std::int64_t tp() const { return static_cast<std::int64_t>(pairs.size()); }
  std::int64_t fp() const { return static_cast<std::int64_t>(unmatched_pred.size()); }
  std::int64_t fn() const { return static_cast<std::int64_t>(unmatched_gt.size()); }
};

struct ClassScore {
  int cls = 0;
  std::int64_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  bool in_gt = false;  // macro averages run over classes present in gt
};

struct MetricsReport {
  std::int64_t tp = 0, fp = 0, fn = 0;
  double det_precision = 0.0, det_recall = 0.0, det_f1 = 0.0;
  // Population statistics over paired distances; NaN when nothing matched.
  double dist_mean = std::numeric_limits<double>::quiet_NaN();
  double dist_std = std::numeric_limits<double>::quiet_NaN();
  double cls_precision = 0.0, cls_recall = 0.0, cls_f1 = 0.0;
  std::vector<ClassScore> per_class;
  // Label accuracy for classification-only (vector) evaluations.
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  bool empty_gt = false;
  bool empty_pred = false;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

// Greedy peak extraction over a stack of per-class probability maps: local
// maxima of the channelwise max above `score_threshold`, visited in
// descending score, each accepted peak suppressing later candidates within
// `suppression_radius`. Detection class = argmax channel at the peak.
std::vector<Detection> nms(const std::vector<std::vector<double>>& class_maps,
                           int height, int width, double score_threshold,
                           double suppression_radius);

// Minimum-cost assignment (Kuhn-Munkres with potentials). Rectangular inputs
// are supported; the result assigns min(rows, cols) pairs. Returns, per row,
// the assigned column or -1. An empty matrix yields an empty assignment.
std::vector<int> hungarian(const std::vector<std::vector<double>>& cost);

// Euclidean-cost Hungarian matching with pairs farther than `radius`
// forbidden; leftovers become false positives / false negatives.
MatchReport match_detections(std::span<const Detection> preds,
                             std::span<const GtPoint> gts, double radius = 16.0);

// Detection P/R/F1 from the match, mu/sigma over paired distances, and
// per-class classification P/R/F1 on matched pairs (a pair counts for class
// c only when both sides are c), macro-averaged over classes present in gt.
MetricsReport score_match(const MatchReport& match,
                          std::span<const Detection> preds,
                          std::span<const GtPoint> gts);

// Field-wise mean over per-case reports; counts are summed, distance stats
// average over the cases that have pairs.
MetricsReport average_reports(std::span<const MetricsReport> reports);

}  // namespace dgp
