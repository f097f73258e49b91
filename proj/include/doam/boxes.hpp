#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "doam/errors.hpp"

namespace doam {

// Axis-aligned box in pixels; width = xmax - xmin.
struct Box {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return xmin < xmax && ymin < ymax; }
  bool operator==(const Box&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double h = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: degenerate box");
  const double inter = intersection_area(a, b);
  return inter / (a.area() + b.area() - inter);
}

struct Detection {
  int class_id = 0;
  double score = 0;
  Box box;
};

// Anchor in centre form.
struct Anchor {
  double cx, cy, w, h;
  Box box() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
};

// Offset variances used by the encoding, as in single-shot detectors.
inline constexpr double kCenterVariance = 0.1;
inline constexpr double kSizeVariance = 0.2;

inline std::array<double, 4> encode_box(const Box& gt, const Anchor& a) {
  const double cx = (gt.xmin + gt.xmax) / 2, cy = (gt.ymin + gt.ymax) / 2;
  return {(cx - a.cx) / a.w / kCenterVariance, (cy - a.cy) / a.h / kCenterVariance,
          std::log(gt.width() / a.w) / kSizeVariance, std::log(gt.height() / a.h) / kSizeVariance};
}

inline Box decode_box(const std::array<double, 4>& off, const Anchor& a) {
  const double cx = a.cx + off[0] * kCenterVariance * a.w;
  const double cy = a.cy + off[1] * kCenterVariance * a.h;
  const double w = a.w * std::exp(std::clamp(off[2] * kSizeVariance, -10.0, 10.0));
  const double h = a.h * std::exp(std::clamp(off[3] * kSizeVariance, -10.0, 10.0));
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

inline Box clip_box(const Box& b, double width, double height) {
  return {std::clamp(b.xmin, 0.0, width), std::clamp(b.ymin, 0.0, height), std::clamp(b.xmax, 0.0, width),
          std::clamp(b.ymax, 0.0, height)};
}

// Greedy per-class NMS. Output sorted by descending score; ties keep input order.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold, std::size_t max_keep = 200) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    if (!d.box.valid()) continue;
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
    if (kept.size() >= max_keep) break;
  }
  return kept;
}

}  // namespace doam
