#include "dgp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dgp {

namespace {

double f1_of(double p, double r) { return p + r > 0.0 ? 2 * p * r / (p + r) : 0.0; }

double ratio(std::int64_t num, std::int64_t den) {
  return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
}

double point_distance(int ax, int ay, int bx, int by) {
  const double dx = ax - bx, dy = ay - by;
  return std::sqrt(dx * dx + dy * dy);
}

double json_double(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return v.get<double>();
}

nlohmann::json double_or_null(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}

}  // namespace

void to_json(nlohmann::json& j, const MetricsReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& c : r.per_class)
    per_class.push_back({{"class", c.cls},
                         {"tp", c.tp},
                         {"fp", c.fp},
                         {"fn", c.fn},
                         {"precision", c.precision},
                         {"recall", c.recall},
                         {"f1", c.f1},
                         {"in_gt", c.in_gt}});
  j = nlohmann::json{{"tp", r.tp},
                     {"fp", r.fp},
                     {"fn", r.fn},
                     {"det_precision", r.det_precision},
                     {"det_recall", r.det_recall},
                     {"det_f1", r.det_f1},
                     {"dist_mean", double_or_null(r.dist_mean)},
                     {"dist_std", double_or_null(r.dist_std)},
                     {"cls_precision", r.cls_precision},
                     {"cls_recall", r.cls_recall},
                     {"cls_f1", r.cls_f1},
                     {"accuracy", double_or_null(r.accuracy)},
                     {"per_class", per_class},
                     {"empty_gt", r.empty_gt},
                     {"empty_pred", r.empty_pred}};
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r = MetricsReport{};
  r.tp = j.at("tp").get<std::int64_t>();
  r.fp = j.at("fp").get<std::int64_t>();
  r.fn = j.at("fn").get<std::int64_t>();
  r.det_precision = j.at("det_precision").get<double>();
  r.det_recall = j.at("det_recall").get<double>();
  r.det_f1 = j.at("det_f1").get<double>();
  r.dist_mean = json_double(j, "dist_mean");
  r.dist_std = json_double(j, "dist_std");
  r.cls_precision = j.at("cls_precision").get<double>();
  r.cls_recall = j.at("cls_recall").get<double>();
  r.cls_f1 = j.at("cls_f1").get<double>();
  r.accuracy = json_double(j, "accuracy");
  r.empty_gt = j.at("empty_gt").get<bool>();
  r.empty_pred = j.at("empty_pred").get<bool>();
  for (const auto& c : j.at("per_class")) {
    ClassScore s;
    s.cls = c.at("class").get<int>();
    s.tp = c.at("tp").get<std::int64_t>();
    s.fp = c.at("fp").get<std::int64_t>();
    s.fn = c.at("fn").get<std::int64_t>();
    s.precision = c.at("precision").get<double>();
    s.recall = c.at("recall").get<double>();
    s.f1 = c.at("f1").get<double>();
    s.in_gt = c.at("in_gt").get<bool>();
    r.per_class.push_back(s);
  }
}

std::vector<Detection> nms(const std::vector<std::vector<double>>& class_maps,
                           int height, int width, double score_threshold,
                           double suppression_radius) {
  if (class_maps.empty()) throw std::invalid_argument("nms: no class maps");
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (const auto& m : class_maps) {
    if (m.size() != plane) throw std::invalid_argument("nms: map size mismatch");
    for (double v : m)
      if (!std::isfinite(v)) throw std::invalid_argument("nms: non-finite map value");
  }

  // Channelwise max map and argmax class per pixel.
  std::vector<double> combined(plane, 0.0);
  std::vector<int> best_cls(plane, 0);
  for (std::size_t c = 0; c < class_maps.size(); ++c)
    for (std::size_t p = 0; p < plane; ++p)
      if (class_maps[c][p] > combined[p] || c == 0) {
        combined[p] = class_maps[c][p];
        best_cls[p] = static_cast<int>(c);
      }

  // Candidates: 8-neighborhood local maxima at or above the threshold.
  std::vector<Detection> candidates;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double v = combined[static_cast<std::size_t>(y) * width + x];
      if (v < score_threshold) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= height || nx < 0 || nx >= width) continue;
          if (combined[static_cast<std::size_t>(ny) * width + nx] > v) {
            is_max = false;
            break;
          }
        }
      if (is_max)
        candidates.push_back(
            {x, y, best_cls[static_cast<std::size_t>(y) * width + x], v});
    }

  std::sort(candidates.begin(), candidates.end(),
            [](const Detection& a, const Detection& b) {
              if (a.score != b.score) return a.score > b.score;
              if (a.y != b.y) return a.y < b.y;
              return a.x < b.x;
            });

  std::vector<Detection> accepted;
  for (const auto& c : candidates) {
    bool keep = true;
    for (const auto& a : accepted)
      if (point_distance(c.x, c.y, a.x, a.y) <= suppression_radius) {
        keep = false;
        break;
      }
    if (keep) accepted.push_back(c);
  }
  return accepted;
}

namespace {

// Shortest-augmenting-path assignment over an n x m matrix with n <= m.
// Returns row -> column. Exact for integer-valued costs.
std::vector<int> assign_rows(const std::vector<std::vector<double>>& cost,
                             int n, int m) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(m) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1)]
                               [static_cast<std::size_t>(j - 1)] -
                           u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<std::size_t>(j)] > 0)
      row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

}  // namespace

std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  const int m = static_cast<int>(cost[0].size());
  if (m == 0) return std::vector<int>(static_cast<std::size_t>(n), -1);
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != m)
      throw std::invalid_argument("hungarian: ragged cost matrix");
    for (double c : row)
      if (!std::isfinite(c))
        throw std::invalid_argument("hungarian: non-finite cost");
  }
  if (n <= m) return assign_rows(cost, n, m);
  // More rows than columns: solve the transpose and invert the assignment.
  std::vector<std::vector<double>> t(static_cast<std::size_t>(m),
                                     std::vector<double>(static_cast<std::size_t>(n)));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] =
          cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  const auto col_to_row = assign_rows(t, m, n);
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 0; j < m; ++j)
    if (col_to_row[static_cast<std::size_t>(j)] >= 0)
      row_to_col[static_cast<std::size_t>(col_to_row[static_cast<std::size_t>(j)])] = j;
  return row_to_col;
}

MatchReport match_detections(std::span<const Detection> preds,
                             std::span<const GtPoint> gts, double radius) {
  if (radius <= 0.0) throw std::invalid_argument("match_detections: radius must be > 0");
  // Forbidden-pair surrogate; large enough to dominate any feasible total, so
  // the optimum maximizes feasible pairs first, then minimizes distance.
  constexpr double kBig = 1e6;

  MatchReport report;
  const int np = static_cast<int>(preds.size());
  const int ng = static_cast<int>(gts.size());
  std::vector<int> assigned(static_cast<std::size_t>(np), -1);
  if (np > 0 && ng > 0) {
    std::vector<std::vector<double>> cost(
        static_cast<std::size_t>(np),
        std::vector<double>(static_cast<std::size_t>(ng)));
    for (int i = 0; i < np; ++i)
      for (int j = 0; j < ng; ++j) {
        const double d = point_distance(preds[static_cast<std::size_t>(i)].x,
                                        preds[static_cast<std::size_t>(i)].y,
                                        gts[static_cast<std::size_t>(j)].x,
                                        gts[static_cast<std::size_t>(j)].y);
        cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
            d <= radius ? d : kBig;
      }
    assigned = hungarian(cost);
  }

  std::vector<char> gt_used(static_cast<std::size_t>(ng), 0);
  for (int i = 0; i < np; ++i) {
    const int j = assigned[static_cast<std::size_t>(i)];
    if (j < 0) continue;
    const double d = point_distance(preds[static_cast<std::size_t>(i)].x,
                                    preds[static_cast<std::size_t>(i)].y,
                                    gts[static_cast<std::size_t>(j)].x,
                                    gts[static_cast<std::size_t>(j)].y);
    if (d <= radius) {
      report.pairs.push_back({i, j, d});
      gt_used[static_cast<std::size_t>(j)] = 1;
    }
  }
  std::sort(report.pairs.begin(), report.pairs.end(),
            [](const MatchPair& a, const MatchPair& b) { return a.gt < b.gt; });

  std::vector<char> pred_used(static_cast<std::size_t>(np), 0);
  for (const auto& p : report.pairs) pred_used[static_cast<std::size_t>(p.pred)] = 1;
  for (int i = 0; i < np; ++i)
    if (!pred_used[static_cast<std::size_t>(i)]) report.unmatched_pred.push_back(i);
  for (int j = 0; j < ng; ++j)
    if (!gt_used[static_cast<std::size_t>(j)]) report.unmatched_gt.push_back(j);
  return report;
}

MetricsReport score_match(const MatchReport& match,
                          std::span<const Detection> preds,
                          std::span<const GtPoint> gts) {
  MetricsReport r;
  r.tp = match.tp();
  r.fp = match.fp();
  r.fn = match.fn();
  r.empty_pred = preds.empty();
  r.empty_gt = gts.empty();
  r.det_precision = ratio(r.tp, r.tp + r.fp);
  r.det_recall = ratio(r.tp, r.tp + r.fn);
  r.det_f1 = f1_of(r.det_precision, r.det_recall);

  if (!match.pairs.empty()) {
    double sum = 0.0;
    for (const auto& p : match.pairs) sum += p.distance;
    const double mean = sum / static_cast<double>(match.pairs.size());
    double sq = 0.0;
    for (const auto& p : match.pairs)
      sq += (p.distance - mean) * (p.distance - mean);
    r.dist_mean = mean;
    r.dist_std = std::sqrt(sq / static_cast<double>(match.pairs.size()));
  }

  // Classification on matched pairs: per class c, a pair is a true positive
  // only when pred class == gt class == c; remaining predictions of c count
  // as false positives, remaining ground truths of c as false negatives.
  std::vector<int> classes;
  for (const auto& p : preds)
    if (std::find(classes.begin(), classes.end(), p.cls) == classes.end())
      classes.push_back(p.cls);
  for (const auto& g : gts)
    if (std::find(classes.begin(), classes.end(), g.cls) == classes.end())
      classes.push_back(g.cls);
  std::sort(classes.begin(), classes.end());

  double macro_p = 0.0, macro_r = 0.0, macro_f1 = 0.0;
  std::int64_t gt_classes = 0;
  for (int cls : classes) {
    ClassScore s;
    s.cls = cls;
    std::int64_t pred_count = 0, gt_count = 0;
    for (const auto& p : preds) pred_count += p.cls == cls;
    for (const auto& g : gts) gt_count += g.cls == cls;
    for (const auto& pair : match.pairs) {
      const int pc = preds[static_cast<std::size_t>(pair.pred)].cls;
      const int gc = gts[static_cast<std::size_t>(pair.gt)].cls;
      s.tp += pc == cls && gc == cls;
    }
    s.fp = pred_count - s.tp;
    s.fn = gt_count - s.tp;
    s.precision = ratio(s.tp, s.tp + s.fp);
    s.recall = ratio(s.tp, s.tp + s.fn);
    s.f1 = f1_of(s.precision, s.recall);
    s.in_gt = gt_count > 0;
    if (s.in_gt) {
      macro_p += s.precision;
      macro_r += s.recall;
      macro_f1 += s.f1;
      ++gt_classes;
    }
    r.per_class.push_back(s);
  }
  if (gt_classes > 0) {
    r.cls_precision = macro_p / static_cast<double>(gt_classes);
    r.cls_recall = macro_r / static_cast<double>(gt_classes);
    r.cls_f1 = macro_f1 / static_cast<double>(gt_classes);
  }
  return r;
}

MetricsReport average_reports(std::span<const MetricsReport> reports) {
  MetricsReport out;
  if (reports.empty()) return out;
  double mean_n = 0.0, std_n = 0.0, acc_sum = 0.0;
  std::int64_t dist_cases = 0, acc_cases = 0;
  for (const auto& r : reports) {
    out.tp += r.tp;
    out.fp += r.fp;
    out.fn += r.fn;
    out.det_precision += r.det_precision;
    out.det_recall += r.det_recall;
    out.det_f1 += r.det_f1;
    out.cls_precision += r.cls_precision;
    out.cls_recall += r.cls_recall;
    out.cls_f1 += r.cls_f1;
    if (!std::isnan(r.dist_mean)) {
      mean_n += r.dist_mean;
      std_n += r.dist_std;
      ++dist_cases;
    }
    if (!std::isnan(r.accuracy)) {
      acc_sum += r.accuracy;
      ++acc_cases;
    }
    out.empty_gt = out.empty_gt || r.empty_gt;
    out.empty_pred = out.empty_pred || r.empty_pred;
  }
  const auto n = static_cast<double>(reports.size());
  out.det_precision /= n;
  out.det_recall /= n;
  out.det_f1 /= n;
  out.cls_precision /= n;
  out.cls_recall /= n;
  out.cls_f1 /= n;
  if (dist_cases > 0) {
    out.dist_mean = mean_n / static_cast<double>(dist_cases);
    out.dist_std = std_n / static_cast<double>(dist_cases);
  }
  if (acc_cases > 0) out.accuracy = acc_sum / static_cast<double>(acc_cases);
  return out;
}

}  // namespace dgp
