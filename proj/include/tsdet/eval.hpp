// SPDX-License-Identifier: Apache-2.0
//
// COCO-style box evaluation and the paired t-test used to compare runs.
//
// Matching follows the COCO protocol: per image and class, detections in
// score order take the highest-IoU unmatched ground truth at or above the
// threshold (lowest index on ties). Ground truth outside the area band is
// "ignore": a detection matched to it, or an unmatched detection whose own
// area is outside the band, counts neither way.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdet/error.hpp"
#include "tsdet/geometry.hpp"

namespace tsdet {

inline constexpr int kNumIouThresholds = 10;
inline constexpr int kRecallPoints = 101;

// 0.50, 0.55, ..., 0.95
inline double iou_threshold(int t) { return (50 + 5 * t) / 100.0; }

struct AreaRange {
  double lo = 0;
  double hi = std::numeric_limits<double>::infinity();
  bool lo_open = false;  // (lo, hi] instead of [lo, hi]

  bool contains(double area) const { return (lo_open ? area > lo : area >= lo) && area <= hi; }
  static AreaRange all() { return {}; }
};

struct EvalConfig {
  double medium_min = 16.0 * 16.0;
  double medium_max = 48.0 * 48.0;  // large is strictly above this
};

inline AreaRange medium_range(const EvalConfig& c) { return {c.medium_min, c.medium_max, false}; }
inline AreaRange large_range(const EvalConfig& c) { return {c.medium_max, std::numeric_limits<double>::infinity(), true}; }

inline double box_area(const Box& b) { return std::max(0.0, double(b.x2) - b.x1) * std::max(0.0, double(b.y2) - b.y1); }

struct MatchRecord {
  enum Outcome { kTruePositive, kFalsePositive, kIgnored };
  int image = 0;
  int detection = 0;  // index into that image's detection list
  int class_id = 0;
  float score = 0;
  Outcome outcome = kFalsePositive;
  int gt_index = -1;  // matched ground truth, -1 if none
  double iou = 0;
};

struct ImageMatch {
  std::vector<MatchRecord> records;   // in detection processing order
  std::vector<bool> gt_matched;       // per ground truth
  std::vector<bool> gt_ignored;       // per ground truth
  std::map<int, int> positives;       // class -> non-ignored ground truth count

  int false_negatives() const {
    int n = 0;
    for (std::size_t g = 0; g < gt_matched.size(); ++g) n += !gt_matched[g] && !gt_ignored[g];
    return n;
  }
};

inline bool sorted_by_score(const std::vector<Detection>& dets) {
  for (std::size_t i = 1; i < dets.size(); ++i)
    if (dets[i].score > dets[i - 1].score) return false;
  return true;
}

// `detections` must be sorted by score, descending.
inline ImageMatch match_detections(const std::vector<Detection>& detections, const std::vector<Annotation>& ground_truth,
                                   double iou_threshold, const AreaRange& range = AreaRange::all(), int image = 0) {
  if (!sorted_by_score(detections)) throw DomainError("match_detections: detections must be sorted by descending score");
  ImageMatch m;
  m.gt_matched.assign(ground_truth.size(), false);
  m.gt_ignored.resize(ground_truth.size());
  for (std::size_t g = 0; g < ground_truth.size(); ++g) {
    m.gt_ignored[g] = !range.contains(box_area(ground_truth[g].box));
    if (!m.gt_ignored[g]) ++m.positives[ground_truth[g].class_id];
  }
  for (std::size_t d = 0; d < detections.size(); ++d) {
    const auto& det = detections[d];
    MatchRecord r{image, static_cast<int>(d), det.class_id, det.score, MatchRecord::kFalsePositive, -1, 0};
    // Non-ignored ground truth first; fall back to ignored ones.
    for (int pass = 0; pass < 2 && r.gt_index < 0; ++pass) {
      double best = -1;
      for (std::size_t g = 0; g < ground_truth.size(); ++g) {
        if (m.gt_matched[g] || ground_truth[g].class_id != det.class_id || m.gt_ignored[g] != (pass == 1)) continue;
        const double o = iou(det.box, ground_truth[g].box);
        if (o >= iou_threshold && o > best) best = o, r.gt_index = static_cast<int>(g);
      }
      if (r.gt_index >= 0) {
        r.iou = best;
        r.outcome = pass == 0 ? MatchRecord::kTruePositive : MatchRecord::kIgnored;
      }
    }
    if (r.gt_index >= 0) m.gt_matched[static_cast<std::size_t>(r.gt_index)] = true;
    else if (!range.contains(box_area(det.box))) r.outcome = MatchRecord::kIgnored;
    m.records.push_back(r);
  }
  return m;
}

struct ApResult {
  bool defined = false;  // false when the class has no ground truth
  double ap = 0;         // 101-point interpolated
  double ap_exact = 0;   // area under the monotone precision envelope
  int num_gt = 0;
  int num_det = 0;
};

// Precision/recall from the global ranking of one class's non-ignored
// detections (stable in image, then detection order).
inline ApResult average_precision(const std::vector<ImageMatch>& matches, int class_id) {
  ApResult out;
  std::vector<const MatchRecord*> dets;
  for (const auto& m : matches) {
    auto it = m.positives.find(class_id);
    if (it != m.positives.end()) out.num_gt += it->second;
    for (const auto& r : m.records)
      if (r.class_id == class_id && r.outcome != MatchRecord::kIgnored) dets.push_back(&r);
  }
  out.num_det = static_cast<int>(dets.size());
  if (out.num_gt == 0) return out;
  out.defined = true;
  std::stable_sort(dets.begin(), dets.end(), [](const MatchRecord* a, const MatchRecord* b) { return a->score > b->score; });
  const std::size_t n = dets.size();
  std::vector<long long> tp(n);
  std::vector<double> precision(n);
  long long t = 0;
  for (std::size_t i = 0; i < n; ++i) {
    t += dets[i]->outcome == MatchRecord::kTruePositive;
    tp[i] = t;
    precision[i] = static_cast<double>(t) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  const long long npos = out.num_gt;
  // recall_i >= r/100  <=>  100 tp_i >= r npos
  double sum = 0;
  std::size_t i = 0;
  for (int r = 0; r < kRecallPoints; ++r) {
    while (i < n && 100 * tp[i] < r * npos) ++i;
    sum += i < n ? precision[i] : 0.0;
  }
  out.ap = sum / kRecallPoints;
  long long prev = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (tp[k] != prev) out.ap_exact += static_cast<double>(tp[k] - prev) / static_cast<double>(npos) * precision[k];
    prev = tp[k];
  }
  return out;
}

struct ClassAp {
  int class_id = 0;
  int num_gt = 0;
  bool defined = false;
  std::array<double, kNumIouThresholds> ap{};  // per IoU threshold
  double ap50_exact = 0;
};

struct EvalResult {
  std::vector<ClassAp> per_class;
  std::array<double, kNumIouThresholds> map_at{};  // mAP per IoU threshold
  double map50 = 0, map75 = 0, map50_95 = 0;
  std::optional<double> map_medium, map_large;  // empty when no class has ground truth in the band
  double map50_exact = 0;
  std::vector<MatchRecord> match_log;  // IoU 0.50, all areas
  std::vector<std::string> log;

  double ap50(int class_id) const {
    for (const auto& c : per_class)
      if (c.class_id == class_id) return c.defined ? c.ap[0] : 0.0;
    return 0.0;
  }
};

namespace eval_detail {

inline std::vector<Detection> sort_by_score(const std::vector<Detection>& d) {
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a].score > d[b].score; });
  std::vector<Detection> out;
  for (auto i : order) out.push_back(d[i]);
  return out;
}

// Mean over classes with ground truth; nullopt if there are none.
inline std::optional<double> mean_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation>>& gts,
                                     int num_classes, double thr, const AreaRange& range, std::vector<ApResult>* per_class = nullptr,
                                     std::vector<ImageMatch>* matches_out = nullptr) {
  std::vector<ImageMatch> matches;
  for (std::size_t i = 0; i < dets.size(); ++i) matches.push_back(match_detections(dets[i], gts[i], thr, range, static_cast<int>(i)));
  double sum = 0;
  int defined = 0;
  if (per_class) per_class->clear();
  for (int c = 0; c < num_classes; ++c) {
    const auto ap = average_precision(matches, c);
    if (per_class) per_class->push_back(ap);
    if (!ap.defined) continue;
    sum += ap.ap;
    ++defined;
  }
  if (matches_out) *matches_out = std::move(matches);
  if (defined == 0) return std::nullopt;
  return sum / defined;
}

}  // namespace eval_detail

// Detections need not be pre-sorted; each image's list is stably sorted by
// score first.
inline EvalResult map_summary(const std::vector<std::vector<Detection>>& detections, const std::vector<std::vector<Annotation>>& ground_truth,
                              int num_classes, const EvalConfig& cfg = {}) {
  if (detections.size() != ground_truth.size()) throw ShapeError("map_summary: detections and ground truth cover different image counts");
  if (detections.empty()) throw DomainError("map_summary: empty evaluation set");
  std::vector<std::vector<Detection>> dets;
  for (const auto& d : detections) dets.push_back(eval_detail::sort_by_score(d));

  EvalResult res;
  res.per_class.resize(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) res.per_class[static_cast<std::size_t>(c)].class_id = c;
  std::vector<ApResult> aps;
  for (int t = 0; t < kNumIouThresholds; ++t) {
    std::vector<ImageMatch> matches;
    const auto m = eval_detail::mean_ap(dets, ground_truth, num_classes, iou_threshold(t), AreaRange::all(), &aps, t == 0 ? &matches : nullptr);
    res.map_at[static_cast<std::size_t>(t)] = m.value_or(0.0);
    for (int c = 0; c < num_classes; ++c) {
      auto& pc = res.per_class[static_cast<std::size_t>(c)];
      const auto& ap = aps[static_cast<std::size_t>(c)];
      pc.defined = ap.defined;
      pc.num_gt = ap.num_gt;
      pc.ap[static_cast<std::size_t>(t)] = ap.ap;
      if (t == 0) pc.ap50_exact = ap.ap_exact;
    }
    if (t == 0) {
      for (const auto& im : matches) res.match_log.insert(res.match_log.end(), im.records.begin(), im.records.end());
      double s = 0;
      int n = 0;
      for (const auto& ap : aps)
        if (ap.defined) s += ap.ap_exact, ++n;
      res.map50_exact = n ? s / n : 0.0;
    }
  }
  for (const auto& pc : res.per_class)
    if (!pc.defined) res.log.push_back("class " + std::to_string(pc.class_id) + " has no ground truth; AP undefined and excluded from mAP");
  res.map50 = res.map_at[0];
  res.map75 = res.map_at[5];
  double s = 0;
  for (double v : res.map_at) s += v;
  res.map50_95 = s / kNumIouThresholds;

  auto band = [&](const AreaRange& r, const char* name) -> std::optional<double> {
    double sum = 0;
    for (int t = 0; t < kNumIouThresholds; ++t) {
      const auto m = eval_detail::mean_ap(dets, ground_truth, num_classes, iou_threshold(t), r);
      if (!m) {
        res.log.push_back(std::string("no ground truth in the ") + name + " band; mAP_" + name + " undefined");
        return std::nullopt;
      }
      sum += *m;
    }
    return sum / kNumIouThresholds;
  };
  res.map_medium = band(medium_range(cfg), "medium");
  res.map_large = band(large_range(cfg), "large");
  return res;
}

inline nlohmann::ordered_json to_json(const EvalResult& r, bool include_match_log = false) {
  nlohmann::ordered_json j;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
  j["mAP50"] = r.map50;
  j["mAP75"] = r.map75;
  j["mAP50_95"] = r.map50_95;
  j["mAPm"] = opt(r.map_medium);
  j["mAPl"] = opt(r.map_large);
  j["mAP50_exact_area"] = r.map50_exact;
  j["mAP_per_threshold"] = r.map_at;
  j["per_class"] = nlohmann::ordered_json::array();
  for (const auto& c : r.per_class) {
    nlohmann::ordered_json pc;
    pc["class_id"] = c.class_id;
    pc["num_gt"] = c.num_gt;
    pc["AP50"] = c.defined ? nlohmann::ordered_json(c.ap[0]) : nlohmann::ordered_json(nullptr);
    pc["AP75"] = c.defined ? nlohmann::ordered_json(c.ap[5]) : nlohmann::ordered_json(nullptr);
    double s = 0;
    for (double v : c.ap) s += v;
    pc["AP50_95"] = c.defined ? nlohmann::ordered_json(s / kNumIouThresholds) : nlohmann::ordered_json(nullptr);
    pc["AP50_exact_area"] = c.defined ? nlohmann::ordered_json(c.ap50_exact) : nlohmann::ordered_json(nullptr);
    j["per_class"].push_back(pc);
  }
  j["log"] = r.log;
  if (include_match_log) {
    j["match_log"] = nlohmann::ordered_json::array();
    static const char* names[] = {"tp", "fp", "ignore"};
    for (const auto& m : r.match_log)
      j["match_log"].push_back(
          {{"image", m.image}, {"detection", m.detection}, {"class_id", m.class_id}, {"score", m.score}, {"outcome", names[m.outcome]}, {"gt", m.gt_index}});
  }
  return j;
}

// ---------------------------------------------------------------------------
// Paired t-test

// Regularized incomplete beta I_x(a, b), continued fraction evaluated with
// the modified Lentz method.
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw DomainError("incomplete_beta: a and b must be positive");
  if (x < 0 || x > 1) throw DomainError("incomplete_beta: x must lie in [0, 1]");
  if (x == 0 || x == 1) return x;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  auto cf = [](double a, double b, double x) {
    constexpr double tiny = 1e-300, eps = 1e-16;
    double c = 1, d = 1 - (a + b) * x / (a + 1);
    if (std::abs(d) < tiny) d = tiny;
    d = 1 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
      const double m2 = 2.0 * m;
      double num = m * (b - m) * x / ((a + m2 - 1) * (a + m2));
      d = 1 + num * d;
      c = 1 + num / c;
      if (std::abs(d) < tiny) d = tiny;
      if (std::abs(c) < tiny) c = tiny;
      d = 1 / d;
      h *= d * c;
      num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1));
      d = 1 + num * d;
      c = 1 + num / c;
      if (std::abs(d) < tiny) d = tiny;
      if (std::abs(c) < tiny) c = tiny;
      d = 1 / d;
      const double delta = d * c;
      h *= delta;
      if (std::abs(delta - 1) < eps) return h;
    }
    throw NumericError("incomplete_beta: continued fraction did not converge");
  };
  if (x < (a + 1) / (a + b + 2)) return std::exp(ln_front) * cf(a, b, x) / a;
  return 1 - std::exp(ln_front) * cf(b, a, 1 - x) / b;
}

// Two-sided tail probability P(|T| >= |t|) for Student t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (!(df > 0)) throw DomainError("student_t_two_sided_p: df must be positive");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

struct SignificanceReport {
  double t_statistic = 0;
  double p_value = 1;
  int n_pairs = 0;
  double mean_difference = 0;  // mean of a - b
  bool degenerate_variance = false;
};

inline SignificanceReport paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DomainError("paired_t_test: samples differ in length");
  if (a.size() < 2) throw DomainError("paired_t_test: need at least 2 pairs");
  SignificanceReport r;
  r.n_pairs = static_cast<int>(a.size());
  const double n = static_cast<double>(a.size());
  double mean = 0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  r.mean_difference = mean;
  if (ss == 0) {
    r.degenerate_variance = mean != 0;
    r.t_statistic = mean == 0 ? 0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p_value = mean == 0 ? 1 : 0;
    return r;
  }
  const double sd = std::sqrt(ss / (n - 1));
  r.t_statistic = mean / (sd / std::sqrt(n));
  r.p_value = std::clamp(student_t_two_sided_p(r.t_statistic, n - 1), 0.0, 1.0);
  return r;
}

inline nlohmann::ordered_json to_json(const SignificanceReport& r) {
  nlohmann::ordered_json j;
  j["t_statistic"] = std::isfinite(r.t_statistic) ? nlohmann::ordered_json(r.t_statistic) : nlohmann::ordered_json(r.t_statistic > 0 ? "inf" : "-inf");
  j["p_value"] = r.p_value;
  j["n_pairs"] = r.n_pairs;
  j["mean_difference"] = r.mean_difference;
  j["degenerate_variance"] = r.degenerate_variance;
  return j;
}

}  // namespace tsdet
