#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <cstddef>
#include <string>

#include "cbln/errors.hpp"

namespace cbln {

// Inclusive frame interval [start, end]. Candidates with start > end are
// representable (the lower triangle of a score map) but never valid targets.
struct Segment {
  std::size_t start = 0;
  std::size_t end = 0;

  [[nodiscard]] bool valid() const { return start <= end; }
  [[nodiscard]] std::size_t length() const { return valid() ? end - start + 1 : 0; }
  bool operator==(const Segment&) const = default;

  [[nodiscard]] std::string str() const {
    return "(" + std::to_string(start) + "," + std::to_string(end) + ")";
  }
};

// Discrete IoU over inclusive frame sets; 0 for an invalid candidate.
inline double compute_iou(const Segment& p, const Segment& gt) {
  if (!gt.valid()) throw DataError("ground truth " + gt.str() + " has start after end");
  if (!p.valid()) return 0.0;
  const std::size_t lo = std::max(p.start, gt.start);
  const std::size_t hi = std::min(p.end, gt.end);
  const std::size_t inter = hi >= lo ? hi - lo + 1 : 0;
  const std::size_t uni = p.length() + gt.length() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Frame interval -> seconds. The inclusive end frame covers its whole slot,
// so the end timestamp uses e + 1.
inline std::pair<double, double> segment_to_timestamps(const Segment& p, std::size_t T, double duration_s) {
  if (!(duration_s > 0.0)) throw DataError("video duration must be positive");
  if (!p.valid() || p.end >= T) {
    throw DataError("segment " + p.str() + " outside a video of " + std::to_string(T) + " frames");
  }
  const double per_frame = duration_s / static_cast<double>(T);
  return {static_cast<double>(p.start) * per_frame, static_cast<double>(p.end + 1) * per_frame};
}

// Seconds -> frame interval: floor for the start, ceil - 1 for the end, both
// clamped into [0, T). Values within 1e-9 of a frame boundary snap to it.
inline Segment timestamps_to_segment(double start_s, double end_s, std::size_t T, double duration_s) {
  if (T == 0) throw DataError("video has no frames");
  if (!(duration_s > 0.0)) throw DataError("video duration must be positive");
  // Allow rounding slack so timestamps produced from frame indices map back.
  const double slack = 1e-9 * duration_s;
  if (!(start_s >= -slack && start_s <= end_s && end_s <= duration_s + slack)) {
    throw DataError("ground truth (" + std::to_string(start_s) + "s, " + std::to_string(end_s) +
                    "s) outside video duration " + std::to_string(duration_s) + "s");
  }
  auto snap = [](double x) {
    const double r = std::round(x);
    return std::abs(x - r) < 1e-9 ? r : x;
  };
  const double scale = static_cast<double>(T) / duration_s;
  const double first = std::floor(snap(start_s * scale));
  const double last = std::ceil(snap(end_s * scale)) - 1.0;
  const double top = static_cast<double>(T - 1);
  Segment seg{static_cast<std::size_t>(std::clamp(first, 0.0, top)),
              static_cast<std::size_t>(std::clamp(last, 0.0, top))};
  if (seg.end < seg.start) seg.end = seg.start;
  return seg;
}

}  // namespace cbln
