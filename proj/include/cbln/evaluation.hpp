#pragma once

// Ranked predictions from score maps and the "R@n, IoU=m" recall metric.

#include <algorithm>
#include <cstddef>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbln/data.hpp"
#include "cbln/errors.hpp"
#include "cbln/model.hpp"
#include "cbln/segment.hpp"
#include "cbln/tensor.hpp"

namespace cbln {

struct ScoredSegment {
  Segment segment;
  double score = 0.0;
};

using Prediction = std::vector<ScoredSegment>;

// Greedy NMS over the s <= e cells: repeatedly take the best remaining cell
// and drop candidates whose IoU with a kept segment exceeds nms_iou. Equal
// scores are ordered by (start, end).
inline Prediction top_n_segments(const Matrix& scores, std::size_t n, double nms_iou = 0.5) {
  if (n == 0) throw ConfigError("top-n needs n >= 1");
  if (scores.rows == 0 || scores.rows != scores.cols) {
    throw DataError("score map must be a non-empty square matrix, got " + scores.shape_str());
  }
  const std::size_t T = scores.rows;
  Prediction candidates;
  candidates.reserve(T * (T + 1) / 2);
  for (std::size_t s = 0; s < T; ++s) {
    for (std::size_t e = s; e < T; ++e) candidates.push_back({Segment{s, e}, scores(s, e)});
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const ScoredSegment& a, const ScoredSegment& b) { return a.score > b.score; });
  Prediction kept;
  for (const ScoredSegment& c : candidates) {
    if (kept.size() == n) break;
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const ScoredSegment& k) {
      return compute_iou(c.segment, k.segment) > nms_iou;
    });
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

struct MetricSpec {
  std::vector<std::size_t> n{1, 5};
  std::vector<double> iou{0.3, 0.5, 0.7};
  double nms_iou = 0.5;
  // false counts IoU == m as a hit.
  bool strict = false;

  void validate() const {
    if (n.empty() || iou.empty()) throw ConfigError("metric spec needs at least one n and one IoU threshold");
    for (std::size_t v : n) {
      if (v == 0) throw ConfigError("R@n needs n >= 1");
    }
    for (double m : iou) {
      if (!(m > 0.0 && m <= 1.0)) throw ConfigError("IoU thresholds must lie in (0, 1]");
    }
  }

  [[nodiscard]] std::size_t max_n() const { return *std::max_element(n.begin(), n.end()); }
};

// Percentage of samples whose first n predictions contain a segment with
// IoU >= m (IoU > m when strict).
inline double recall_at(std::span<const Prediction> predictions, std::span<const Segment> gts, std::size_t n, double m,
                        bool strict = false) {
  if (predictions.empty()) throw DataError("recall over an empty dataset");
  if (predictions.size() != gts.size()) {
    throw DimensionError("recall: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(gts.size()) + " ground truths");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const std::size_t k = std::min(n, predictions[i].size());
    for (std::size_t j = 0; j < k; ++j) {
      const double iou = compute_iou(predictions[i][j].segment, gts[i]);
      if (strict ? iou > m : iou >= m) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(predictions.size());
}

struct MetricValue {
  std::string metric;
  double value = 0.0;
};

inline std::string metric_name(std::size_t n, double m) {
  std::ostringstream os;
  os << "R@" << n << ",IoU=" << m;
  return os.str();
}

inline std::vector<MetricValue> evaluate_predictions(std::span<const Prediction> predictions,
                                                     std::span<const Segment> gts, const MetricSpec& spec) {
  spec.validate();
  std::vector<MetricValue> out;
  for (std::size_t n : spec.n) {
    for (double m : spec.iou) out.push_back({metric_name(n, m), recall_at(predictions, gts, n, m, spec.strict)});
  }
  return out;
}

inline std::vector<Prediction> predict(const CblnModel& model, std::span<const GroundingExample> data, std::size_t n,
                                       double nms_iou) {
  std::vector<Prediction> out;
  out.reserve(data.size());
  for (const GroundingExample& ex : data) out.push_back(top_n_segments(model.score(ex.features, ex.tokens), n, nms_iou));
  return out;
}

inline std::vector<MetricValue> evaluate_model(const CblnModel& model, std::span<const GroundingExample> data,
                                               const MetricSpec& spec) {
  spec.validate();
  const std::vector<Prediction> preds = predict(model, data, spec.max_n(), spec.nms_iou);
  std::vector<Segment> gts;
  gts.reserve(data.size());
  for (const GroundingExample& ex : data) gts.push_back(ex.gt);
  return evaluate_predictions(preds, gts, spec);
}

inline double metric_value(const std::vector<MetricValue>& values, std::size_t n, double m) {
  const std::string name = metric_name(n, m);
  for (const MetricValue& v : values) {
    if (v.metric == name) return v.value;
  }
  throw ContractError("metric " + name + " was not computed");
}

// One "R@n,IoU=m: value" line per metric.
inline std::string format_report(const std::vector<MetricValue>& values) {
  std::string out;
  char buf[128];
  for (const MetricValue& v : values) {
    std::snprintf(buf, sizeof(buf), "%s: %.2f\n", v.metric.c_str(), v.value);
    out += buf;
  }
  return out;
}

inline nlohmann::json report_json(const std::vector<MetricValue>& values) {
  nlohmann::json arr = nlohmann::json::array();
  for (const MetricValue& v : values) arr.push_back({{"metric", v.metric}, {"value", v.value}});
  return arr;
}

}  // namespace cbln
