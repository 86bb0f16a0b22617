// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "tsdet/error.hpp"

namespace tsdet {

// Axis-aligned box in pixel coordinates, origin top-left.
struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return std::max(0.0f, width()) * std::max(0.0f, height()); }
  float cx() const { return 0.5f * (x1 + x2); }
  float cy() const { return 0.5f * (y1 + y2); }
  bool valid() const { return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 <= x2 && y1 <= y2; }
  bool operator==(const Box&) const = default;
};

// Ground-truth instance.
struct Annotation {
  Box box;
  int class_id = 0;
  bool operator==(const Annotation&) const = default;
};

// Scored prediction.
struct Detection {
  Box box;
  int class_id = 0;
  float score = 0;
};

using Deltas = std::array<float, 4>;

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min<double>(a.x2, b.x2) - std::max<double>(a.x1, b.x1);
  const double ih = std::min<double>(a.y2, b.y2) - std::max<double>(a.y1, b.y1);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// Regression targets relative to an anchor: center offsets in anchor units,
// log size ratios.
inline Deltas encode_deltas(const Box& anchor, const Box& target) {
  if (!(anchor.width() > 0 && anchor.height() > 0)) throw DomainError("encode_deltas: anchor must have positive size");
  if (!(target.width() > 0 && target.height() > 0)) throw DomainError("encode_deltas: target must have positive size");
  const double wa = anchor.width(), ha = anchor.height();
  return {static_cast<float>((double(target.cx()) - anchor.cx()) / wa), static_cast<float>((double(target.cy()) - anchor.cy()) / ha),
          static_cast<float>(std::log(target.width() / wa)), static_cast<float>(std::log(target.height() / ha))};
}

// Size deltas beyond log(1000/16) are clamped so exp() stays finite.
inline constexpr float kMaxLogScale = 4.135166556742356f;

inline Box decode_deltas(const Box& anchor, const Deltas& d) {
  const double wa = anchor.width(), ha = anchor.height();
  const double cx = anchor.cx() + double(d[0]) * wa;
  const double cy = anchor.cy() + double(d[1]) * ha;
  const double w = wa * std::exp(std::min(d[2], kMaxLogScale));
  const double h = ha * std::exp(std::min(d[3], kMaxLogScale));
  return {static_cast<float>(cx - 0.5 * w), static_cast<float>(cy - 0.5 * h), static_cast<float>(cx + 0.5 * w),
          static_cast<float>(cy + 0.5 * h)};
}

inline Box clip_box(const Box& b, float width, float height) {
  auto c = [](float v, float hi) { return std::clamp(v, 0.0f, hi); };
  return {c(b.x1, width), c(b.y1, height), c(b.x2, width), c(b.y2, height)};
}

inline Box decode_deltas(const Box& anchor, const Deltas& d, float clip_width, float clip_height) {
  return clip_box(decode_deltas(anchor, d), clip_width, clip_height);
}

// Indices of `scores` sorted descending; equal scores keep input order.
inline std::vector<std::size_t> score_order(const std::vector<float>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Greedy suppression over boxes already ranked by `order`; returns kept
// positions into `boxes`.
inline std::vector<std::size_t> nms_indices(const std::vector<Box>& boxes, const std::vector<std::size_t>& order, double iou_threshold) {
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool keep = true;
    for (std::size_t k : kept)
      if (iou(boxes[i], boxes[k]) >= iou_threshold) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(i);
  }
  return kept;
}

// Per-class greedy NMS. Output is sorted by score descending, ties by input
// position.
inline std::vector<Detection> classwise_nms(const std::vector<Detection>& dets, double iou_threshold) {
  if (!(iou_threshold > 0 && iou_threshold < 1)) throw DomainError("classwise_nms: iou_threshold must be in (0,1)");
  std::vector<float> scores(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) scores[i] = dets[i].score;
  const auto order = score_order(scores);
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool keep = true;
    for (std::size_t k : kept)
      if (dets[k].class_id == dets[i].class_id && iou(dets[i].box, dets[k].box) >= iou_threshold) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(i);
  }
  std::vector<Detection> out;
  out.reserve(kept.size());
  for (std::size_t k : kept) out.push_back(dets[k]);
  return out;
}

}  // namespace tsdet
