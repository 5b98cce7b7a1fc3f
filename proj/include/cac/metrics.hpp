#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/datamodel.hpp"

namespace cac {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CountRecord {
  int predicted = 0;
  int ground_truth = 0;
};

struct CountErrors {
  double mae = 0.0;
  double rmse = 0.0;
};

inline CountErrors mae_rmse(const std::vector<CountRecord>& records) {
  if (records.empty()) throw MetricError("mae_rmse: no records");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (const auto& r : records) {
    const double e = static_cast<double>(r.predicted) - r.ground_truth;
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const double n = static_cast<double>(records.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

struct ScoredPoint {
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;
};

struct LocalizationRecord {
  std::vector<ScoredPoint> predictions;
  std::vector<Point2> ground_truth;
  std::vector<double> sigmas;  // optional per-GT radius; derived when empty
};

constexpr double kFallbackSigma = 32.0;

// Mean distance from each point to its 3 nearest neighbours in the same
// image; 32 px when fewer than 3 neighbours exist.
inline std::vector<double> gt_sigmas(const std::vector<Point2>& gt) {
  std::vector<double> out(gt.size(), kFallbackSigma);
  if (gt.size() < 4) return out;
  std::vector<double> d;
  for (size_t i = 0; i < gt.size(); ++i) {
    d.clear();
    for (size_t j = 0; j < gt.size(); ++j)
      if (j != i) d.push_back(std::hypot(gt[i].x - gt[j].x, gt[i].y - gt[j].y));
    std::partial_sort(d.begin(), d.begin() + 3, d.end());
    out[i] = (d[0] + d[1] + d[2]) / 3.0;
  }
  return out;
}

// Normalized AP: predictions pooled across images in descending score order
// (stable in image, then prediction order). A prediction is a true positive
// when some unused GT point of its image lies within delta * sigma_g; the GT
// with the smallest normalized distance is consumed. AP uses all-point
// interpolation of the precision/recall curve.
inline double nap(const std::vector<LocalizationRecord>& records, double delta = 0.5) {
  if (delta <= 0) throw MetricError("nap: delta must be positive");
  size_t total_gt = 0;
  for (const auto& r : records) total_gt += r.ground_truth.size();
  if (total_gt == 0) throw MetricError("nap: no ground-truth points");

  struct Ref {
    double score;
    size_t image;
    size_t index;
  };
  std::vector<Ref> order;
  std::vector<std::vector<double>> sigmas(records.size());
  std::vector<std::vector<char>> used(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    sigmas[i] = r.sigmas.empty() ? gt_sigmas(r.ground_truth) : r.sigmas;
    if (sigmas[i].size() != r.ground_truth.size()) throw MetricError("nap: sigma count does not match GT count");
    used[i].assign(r.ground_truth.size(), 0);
    for (size_t j = 0; j < r.predictions.size(); ++j) order.push_back({r.predictions[j].score, i, j});
  }
  if (order.empty()) return 0.0;
  std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

  std::vector<double> precision, recall;
  size_t tp = 0, fp = 0;
  for (const auto& ref : order) {
    const auto& rec = records[ref.image];
    const auto& p = rec.predictions[ref.index];
    int best = -1;
    double best_norm = 0.0;
    for (size_t g = 0; g < rec.ground_truth.size(); ++g) {
      if (used[ref.image][g]) continue;
      const double d = std::hypot(p.x - rec.ground_truth[g].x, p.y - rec.ground_truth[g].y);
      const double norm = d / sigmas[ref.image][g];
      if (d <= delta * sigmas[ref.image][g] && (best < 0 || norm < best_norm)) {
        best = static_cast<int>(g);
        best_norm = norm;
      }
    }
    if (best >= 0) {
      used[ref.image][best] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / total_gt);
  }
  for (size_t i = precision.size() - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, previous_recall = 0.0;
  for (size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - previous_recall) * precision[i];
    previous_recall = recall[i];
  }
  return ap;
}

struct MetricsReport {
  double mae = 0.0;
  double rmse = 0.0;
  double nap = 0.0;
  int n_images = 0;
};

inline nlohmann::json to_json(const MetricsReport& m) {
  return {{"mae", m.mae}, {"rmse", m.rmse}, {"nap", m.nap}, {"n_images", m.n_images}};
}

}  // namespace cac
