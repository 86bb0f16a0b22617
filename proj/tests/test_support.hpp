// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations and fixture generators shared by the
// unit tests and the acceptance suite. Nothing here calls the library code it
// is compared against.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsdet/tsdet.hpp"

namespace tsdet::testing {

// ---------------------------------------------------------------------------
// Geometry oracles

inline double ref_iou(const Box& a, const Box& b) {
  const double ax1 = a.x1, ay1 = a.y1, ax2 = a.x2, ay2 = a.y2;
  const double bx1 = b.x1, by1 = b.y1, bx2 = b.x2, by2 = b.y2;
  const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double ih = std::min(ay2, by2) - std::max(ay1, by1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// True when detection i outranks j: higher score, or equal score and earlier.
inline bool ref_outranks(const std::vector<Detection>& d, std::size_t i, std::size_t j) {
  return d[i].score > d[j].score || (d[i].score == d[j].score && i < j);
}

// Keep-set by definition: a detection survives iff no surviving detection of
// its class that outranks it overlaps it at or above the threshold. Resolved
// by fixpoint over ranks computed pairwise.
inline std::vector<Detection> ref_classwise_nms(const std::vector<Detection>& d, double thr) {
  const std::size_t n = d.size();
  std::vector<std::size_t> rank(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && ref_outranks(d, j, i)) ++rank[i];
  std::vector<std::size_t> by_rank(n);
  for (std::size_t i = 0; i < n; ++i) by_rank[rank[i]] = i;
  std::vector<int> keep(n, -1);  // -1 unknown, 0 suppressed, 1 kept
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = by_rank[r];
    bool suppressed = false;
    for (std::size_t j = 0; j < n; ++j)
      if (keep[j] == 1 && d[j].class_id == d[i].class_id && ref_outranks(d, j, i) && ref_iou(d[i].box, d[j].box) >= thr) suppressed = true;
    keep[i] = suppressed ? 0 : 1;
  }
  std::vector<Detection> out;
  for (std::size_t r = 0; r < n; ++r)
    if (keep[by_rank[r]] == 1) out.push_back(d[by_rank[r]]);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation oracles

struct RefRange {
  double lo = 0, hi = std::numeric_limits<double>::infinity();
  bool lo_open = false;
  bool in(double a) const { return (lo_open ? a > lo : a >= lo) && a <= hi; }
};

inline double ref_area(const Box& b) { return std::max(0.0, double(b.x2) - double(b.x1)) * std::max(0.0, double(b.y2) - double(b.y1)); }

enum class RefOutcome { kTp, kFp, kIgnore };

struct RefMatch {
  std::vector<RefOutcome> outcome;  // per detection, input order (already sorted)
  std::vector<int> gt;              // matched gt or -1
  std::map<int, int> positives;
};

// COCO greedy assignment written against an explicit IoU matrix. Candidate
// ground truth is ranked by (ignored last, IoU desc, index asc).
inline RefMatch ref_match(const std::vector<Detection>& d, const std::vector<Annotation>& g, double thr, const RefRange& range) {
  RefMatch m;
  std::vector<std::vector<double>> io(d.size(), std::vector<double>(g.size()));
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t k = 0; k < g.size(); ++k) io[i][k] = ref_iou(d[i].box, g[k].box);
  std::vector<bool> ign(g.size()), taken(g.size(), false);
  for (std::size_t k = 0; k < g.size(); ++k) {
    ign[k] = !range.in(ref_area(g[k].box));
    if (!ign[k]) m.positives[g[k].class_id]++;
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    int best = -1;
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (taken[k] || g[k].class_id != d[i].class_id || io[i][k] < thr) continue;
      if (best < 0) {
        best = static_cast<int>(k);
        continue;
      }
      const auto b = static_cast<std::size_t>(best);
      const bool better = (!ign[k] && ign[b]) || (ign[k] == ign[b] && io[i][k] > io[i][b]);
      if (better) best = static_cast<int>(k);
    }
    m.gt.push_back(best);
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      m.outcome.push_back(ign[static_cast<std::size_t>(best)] ? RefOutcome::kIgnore : RefOutcome::kTp);
    } else {
      m.outcome.push_back(range.in(ref_area(d[i].box)) ? RefOutcome::kFp : RefOutcome::kIgnore);
    }
  }
  return m;
}

inline std::vector<Detection> ref_sort(const std::vector<Detection>& d) {
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) idx[i] = i;
  // insertion sort: stable by construction
  for (std::size_t i = 1; i < idx.size(); ++i)
    for (std::size_t j = i; j > 0 && d[idx[j]].score > d[idx[j - 1]].score; --j) std::swap(idx[j], idx[j - 1]);
  std::vector<Detection> out;
  for (auto i : idx) out.push_back(d[i]);
  return out;
}

// 101-point AP by direct definition: interpolated precision at recall r is the
// best precision at any rank whose recall reaches r.
inline std::optional<double> ref_ap(const std::vector<std::vector<Detection>>& sorted, const std::vector<RefMatch>& matches, int cls) {
  long long npos = 0;
  struct Item {
    float score;
    std::size_t image, det;
    bool tp;
  };
  std::vector<Item> items;
  for (std::size_t im = 0; im < matches.size(); ++im) {
    auto it = matches[im].positives.find(cls);
    if (it != matches[im].positives.end()) npos += it->second;
    for (std::size_t k = 0; k < sorted[im].size(); ++k)
      if (sorted[im][k].class_id == cls && matches[im].outcome[k] != RefOutcome::kIgnore)
        items.push_back({sorted[im][k].score, im, k, matches[im].outcome[k] == RefOutcome::kTp});
  }
  if (npos == 0) return std::nullopt;
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.det < b.det;
  });
  std::vector<long long> tp(items.size());
  long long t = 0;
  for (std::size_t i = 0; i < items.size(); ++i) tp[i] = (t += items[i].tp);
  double sum = 0;
  for (int r = 0; r <= 100; ++r) {
    double best = 0;
    for (std::size_t i = 0; i < items.size(); ++i)
      if (100 * tp[i] >= static_cast<long long>(r) * npos) best = std::max(best, static_cast<double>(tp[i]) / static_cast<double>(i + 1));
    sum += best;
  }
  return sum / 101;
}

struct RefSummary {
  std::vector<double> map_at;  // 10 thresholds
  double map50 = 0, map75 = 0, map50_95 = 0;
  std::optional<double> medium, large;
  std::vector<std::optional<double>> ap50;
};

inline std::optional<double> ref_mean_ap(const std::vector<std::vector<Detection>>& sorted, const std::vector<std::vector<Annotation>>& gts,
                                         int num_classes, double thr, const RefRange& range, std::vector<std::optional<double>>* per = nullptr) {
  std::vector<RefMatch> matches;
  for (std::size_t i = 0; i < sorted.size(); ++i) matches.push_back(ref_match(sorted[i], gts[i], thr, range));
  double s = 0;
  int n = 0;
  if (per) per->clear();
  for (int c = 0; c < num_classes; ++c) {
    const auto ap = ref_ap(sorted, matches, c);
    if (per) per->push_back(ap);
    if (ap) s += *ap, ++n;
  }
  if (n == 0) return std::nullopt;
  return s / n;
}

inline RefSummary ref_map_summary(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation>>& gts, int num_classes,
                                  double medium_min = 256, double medium_max = 2304) {
  std::vector<std::vector<Detection>> sorted;
  for (const auto& d : dets) sorted.push_back(ref_sort(d));
  RefSummary r;
  for (int t = 0; t < 10; ++t) {
    const double thr = (50 + 5 * t) / 100.0;
    const auto m = ref_mean_ap(sorted, gts, num_classes, thr, RefRange{}, t == 0 ? &r.ap50 : nullptr);
    r.map_at.push_back(m.value_or(0.0));
  }
  r.map50 = r.map_at[0];
  r.map75 = r.map_at[5];
  double s = 0;
  for (double v : r.map_at) s += v;
  r.map50_95 = s / 10;
  auto band = [&](RefRange range) -> std::optional<double> {
    double acc = 0;
    for (int t = 0; t < 10; ++t) {
      const auto m = ref_mean_ap(sorted, gts, num_classes, (50 + 5 * t) / 100.0, range);
      if (!m) return std::nullopt;
      acc += *m;
    }
    return acc / 10;
  };
  r.medium = band({medium_min, medium_max, false});
  r.large = band({medium_max, std::numeric_limits<double>::infinity(), true});
  return r;
}

// ---------------------------------------------------------------------------
// Fixtures

// Integer-coordinate boxes so areas and IoUs are exact; scores from a small
// set so ties occur.
inline Box random_int_box(Rng& rng, int extent, int max_side) {
  const int w = rng.integer(1, max_side), h = rng.integer(1, max_side);
  const int x = rng.integer(0, extent - w), y = rng.integer(0, extent - h);
  return {float(x), float(y), float(x + w), float(y + h)};
}

struct EvalFixture {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Annotation>> gts;
  int num_classes = 3;
};

// Up to 5 images and 10 detections in total; detections often jitter a GT.
inline EvalFixture random_eval_fixture(std::uint64_t seed) {
  Rng rng(seed);
  EvalFixture f;
  f.num_classes = rng.integer(1, 3);
  const int images = rng.integer(1, 5);
  int budget = 10;
  for (int im = 0; im < images; ++im) {
    std::vector<Annotation> g;
    const int ng = rng.integer(0, 4);
    for (int k = 0; k < ng; ++k) g.push_back({random_int_box(rng, 96, 64), rng.integer(0, f.num_classes - 1)});
    std::vector<Detection> d;
    const int nd = im == images - 1 ? budget : rng.integer(0, std::min(budget, 4));
    budget -= nd;
    for (int k = 0; k < nd; ++k) {
      Detection det;
      if (!g.empty() && rng.bernoulli(0.7)) {
        const auto& src = g[rng.index(g.size())];
        const int dx = rng.integer(-4, 4), dy = rng.integer(-4, 4);
        const int dw = rng.integer(-4, 4), dh = rng.integer(-4, 4);
        const float x1 = std::max(0.0f, src.box.x1 + dx), y1 = std::max(0.0f, src.box.y1 + dy);
        const float x2 = std::max(x1 + 1, src.box.x2 + dx + dw), y2 = std::max(y1 + 1, src.box.y2 + dy + dh);
        det.box = {x1, y1, x2, y2};
        det.class_id = rng.bernoulli(0.85) ? src.class_id : rng.integer(0, f.num_classes - 1);
      } else {
        det.box = random_int_box(rng, 96, 64);
        det.class_id = rng.integer(0, f.num_classes - 1);
      }
      det.score = static_cast<float>(rng.integer(1, 9)) / 10.0f;
      d.push_back(det);
    }
    f.dets.push_back(d);
    f.gts.push_back(g);
  }
  return f;
}

inline std::vector<Detection> random_nms_fixture(std::uint64_t seed) {
  Rng rng(seed);
  const int n = rng.integer(0, 10);
  const int classes = rng.integer(1, 3);
  std::vector<Detection> d;
  std::vector<Box> centres;
  for (int i = 0; i < 3; ++i) centres.push_back(random_int_box(rng, 64, 32));
  for (int i = 0; i < n; ++i) {
    const Box& c = centres[rng.index(centres.size())];
    const int dx = rng.integer(-5, 5), dy = rng.integer(-5, 5);
    Box b{std::max(0.0f, c.x1 + dx), std::max(0.0f, c.y1 + dy), 0, 0};
    b.x2 = std::max(b.x1 + 1, c.x2 + dx + rng.integer(-3, 3));
    b.y2 = std::max(b.y1 + 1, c.y2 + dy + rng.integer(-3, 3));
    d.push_back({b, rng.integer(0, classes - 1), static_cast<float>(rng.integer(1, 6)) / 8.0f});
  }
  return d;
}

// ---------------------------------------------------------------------------
// Gradient check cases

struct GradCase {
  std::string name;
  // Builds a loss from the point's parameters on the given tape.
  ScalarFn<double> fn;
  BasicParameterSet<double> point;
};

inline BasicTensor<double> random_tensor(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  BasicTensor<double> t(std::move(s));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Values kept at least `gap` away from every listed kink.
inline BasicTensor<double> random_away_from(Rng& rng, Shape s, std::vector<double> kinks, double gap, double lo = -2, double hi = 2) {
  BasicTensor<double> t(std::move(s));
  for (auto& v : t.data) {
    for (;;) {
      v = rng.uniform(lo, hi);
      bool ok = true;
      for (double k : kinks) ok = ok && std::abs(v - k) > gap;
      if (ok) break;
    }
  }
  return t;
}

inline MatchAssignment random_roi_assignment(Rng& rng, int rows, int num_classes) {
  MatchAssignment a;
  for (int r = 0; r < rows; ++r) {
    MatchLabel l;
    // Row 0 foreground and row 1 background so both sets are non-empty.
    const bool fg = r == 0 || (r != 1 && rng.bernoulli(0.5));
    if (fg) l = {MatchLabel::kPositive, rng.integer(0, num_classes - 1), 0, Box{0, 0, 10, 10}};
    a.labels.push_back(l);
  }
  return a;
}

// A weighted sum keeps every output entry in play.
inline BasicVar<double> weighted_sum(BasicTape<double>& tape, BasicVar<double> y, std::uint64_t seed) {
  Rng rng(seed);
  auto w = tape.constant(random_tensor(rng, y.shape()));
  return ops::sum(ops::mul(y, w));
}

// Every differentiable op and the three ROI classifiers, instantiated for
// one seed.
inline std::vector<GradCase> grad_cases(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6AAD));
  std::vector<GradCase> cases;
  auto unary = [&](std::string name, BasicTensor<double> x, std::function<BasicVar<double>(BasicVar<double>)> op) {
    BasicParameterSet<double> p;
    p.add("x", std::move(x));
    const auto ws = mix_seed(seed, cases.size());
    cases.push_back({name, [op, ws](BasicTape<double>& t, BasicParameterSet<double>& ps) { return weighted_sum(t, op(t.parameter(ps.get("x"))), ws); },
                     std::move(p)});
  };
  auto binary = [&](std::string name, BasicTensor<double> a, BasicTensor<double> b,
                    std::function<BasicVar<double>(BasicVar<double>, BasicVar<double>)> op) {
    BasicParameterSet<double> p;
    p.add("a", std::move(a));
    p.add("b", std::move(b));
    const auto ws = mix_seed(seed, cases.size());
    cases.push_back({name,
                     [op, ws](BasicTape<double>& t, BasicParameterSet<double>& ps) {
                       return weighted_sum(t, op(t.parameter(ps.get("a")), t.parameter(ps.get("b"))), ws);
                     },
                     std::move(p)});
  };
  using V = BasicVar<double>;
  binary("add", random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}), [](V a, V b) { return ops::add(a, b); });
  binary("add_row_broadcast", random_tensor(rng, {3, 4}), random_tensor(rng, {4}), [](V a, V b) { return ops::add(a, b); });
  binary("add_scalar_broadcast", random_tensor(rng, {2, 3}), random_tensor(rng, {1}), [](V a, V b) { return ops::add(a, b); });
  binary("sub", random_tensor(rng, {5}), random_tensor(rng, {5}), [](V a, V b) { return ops::sub(a, b); });
  binary("mul", random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}), [](V a, V b) { return ops::mul(a, b); });
  binary("mul_row_broadcast", random_tensor(rng, {3, 4}), random_tensor(rng, {4}), [](V a, V b) { return ops::mul(a, b); });
  binary("matmul", random_tensor(rng, {3, 5}), random_tensor(rng, {5, 2}), [](V a, V b) { return ops::matmul(a, b); });
  {
    // a - b kept away from the |d| = 1 transition.
    auto b = random_tensor(rng, {8});
    auto d = random_away_from(rng, {8}, {-1.0, 1.0}, 0.05, -3, 3);
    BasicTensor<double> a({8});
    for (std::size_t i = 0; i < 8; ++i) a.data[i] = b.data[i] + d.data[i];
    binary("smooth_l1", std::move(a), std::move(b), [](V a, V b) { return ops::smooth_l1(a, b); });
  }
  unary("scale", random_tensor(rng, {4}), [](V x) { return ops::scale(x, -1.7); });
  unary("add_scalar", random_tensor(rng, {4}), [](V x) { return ops::add_scalar(x, 0.3); });
  unary("relu", random_away_from(rng, {6}, {0.0}, 0.05), [](V x) { return ops::relu(x); });
  unary("sigmoid", random_tensor(rng, {6}, -3, 3), [](V x) { return ops::sigmoid(x); });
  unary("exp", random_tensor(rng, {6}), [](V x) { return ops::exp(x); });
  unary("log", random_tensor(rng, {6}, 0.2, 3), [](V x) { return ops::log(x); });
  unary("softplus", random_tensor(rng, {6}, -4, 4), [](V x) { return ops::softplus(x); });
  unary("pow_scalar", random_tensor(rng, {6}, 0.2, 2), [](V x) { return ops::pow_scalar(x, 2.5); });
  unary("sum", random_tensor(rng, {3, 3}), [](V x) { return ops::reshape(ops::sum(x), {1}); });
  unary("mean", random_tensor(rng, {3, 3}), [](V x) { return ops::reshape(ops::mean(x), {1}); });
  unary("softmax_lastdim", random_tensor(rng, {3, 5}, -2, 2), [](V x) { return ops::softmax_lastdim(x); });
  unary("log_softmax_lastdim", random_tensor(rng, {3, 5}, -2, 2), [](V x) { return ops::log_softmax_lastdim(x); });
  {
    // Distinct entries so the arg-max is stable under the probe step.
    BasicTensor<double> x({3, 4});
    std::vector<double> vals;
    for (int i = 0; i < 12; ++i) vals.push_back(0.1 * i);
    rng.shuffle(vals);
    x.data = vals;
    unary("max_lastdim", std::move(x), [](V x) { return ops::max_lastdim(x); });
  }
  unary("slice", random_tensor(rng, {5, 2}), [](V x) { return ops::slice(x, 1, 4); });
  unary("reshape", random_tensor(rng, {2, 6}), [](V x) { return ops::reshape(x, {3, 4}); });
  unary("gather_with_repeats", random_tensor(rng, {6}), [](V x) { return ops::gather(x, {0, 3, 3, 5, 1, 0}, {2, 3}); });
  binary("concat0", random_tensor(rng, {2, 3}), random_tensor(rng, {1, 3}), [](V a, V b) { return ops::concat0(std::vector<V>{a, b, a}); });
  {
    BasicParameterSet<double> p;
    p.add("x", random_tensor(rng, {2, 3, 7, 6}));
    p.add("w", random_tensor(rng, {4, 3, 3, 3}));
    p.add("b", random_tensor(rng, {4}));
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 0}, std::pair{2, 1}}) {
      const auto ws = mix_seed(seed, cases.size());
      cases.push_back({"conv2d_s" + std::to_string(stride) + "_p" + std::to_string(pad),
                       [=](BasicTape<double>& t, BasicParameterSet<double>& ps) {
                         return weighted_sum(t,
                                             ops::conv2d(t.parameter(ps.get("x")), t.parameter(ps.get("w")), t.parameter(ps.get("b")),
                                                         {stride, pad}),
                                             ws);
                       },
                       p.clone()});
    }
    const auto ws = mix_seed(seed, cases.size());
    cases.push_back({"conv2d_no_bias",
                     [=](BasicTape<double>& t, BasicParameterSet<double>& ps) {
                       return weighted_sum(t, ops::conv2d(t.parameter(ps.get("x")), t.parameter(ps.get("w")), {1, 0}), ws);
                     },
                     p.clone()});
  }
  // Losses.
  const int K = 5;
  const auto roi_assign = random_roi_assignment(rng, 6, K - 1);
  auto roi_case = [&](std::string name, std::function<BasicVar<double>(BasicVar<double>, const MatchAssignment&)> loss) {
    BasicParameterSet<double> p;
    p.add("logits", random_tensor(rng, {6, K}, -2, 2));
    cases.push_back({name, [loss, roi_assign](BasicTape<double>& t, BasicParameterSet<double>& ps) { return loss(t.parameter(ps.get("logits")), roi_assign); },
                     std::move(p)});
  };
  MarginLossConfig mc;
  roi_case("margin_roi_loss", [mc](V x, const MatchAssignment& a) { return margin_roi_loss(x, a, mc); });
  roi_case("margin_roi_loss_s3_sigma0", [](V x, const MatchAssignment& a) { return margin_roi_loss(x, a, MarginLossConfig{3.0, 0.0, 2.0}); });
  roi_case("cross_entropy_roi_loss", [](V x, const MatchAssignment& a) { return cross_entropy_roi_loss(x, a); });
  roi_case("focal_roi_loss", [](V x, const MatchAssignment& a) { return focal_roi_loss(x, a, FocalConfig{2.0, 0.25}); });
  {
    BasicParameterSet<double> p;
    p.add("logits", random_tensor(rng, {10}, -2, 2));
    MatchAssignment a;
    for (int i = 0; i < 10; ++i) {
      MatchLabel l;
      l.kind = i % 3 == 0 ? MatchLabel::kPositive : (i % 3 == 1 ? MatchLabel::kNegative : MatchLabel::kIgnore);
      a.labels.push_back(l);
    }
    const auto rs = mix_seed(seed, 0x77);
    cases.push_back({"rpn_cls_loss",
                     [a, rs](BasicTape<double>& t, BasicParameterSet<double>& ps) {
                       Rng r(rs);
                       return rpn_cls_loss(t.parameter(ps.get("logits")), a, r, 6, 0.5);
                     },
                     std::move(p)});
  }
  {
    BasicParameterSet<double> p;
    p.add("deltas", random_tensor(rng, {3, 4}, -0.4, 0.4));
    std::vector<Box> refs{{0, 0, 10, 12}, {5, 5, 20, 25}, {1, 2, 8, 9}};
    MatchAssignment a;
    a.labels.push_back({MatchLabel::kPositive, 0, 0, Box{1, 1, 12, 11}});
    a.labels.push_back({MatchLabel::kNegative, -1, -1, {}});
    a.labels.push_back({MatchLabel::kPositive, 1, 1, Box{2, 1, 9, 11}});
    cases.push_back({"box_reg_loss",
                     [a, refs](BasicTape<double>& t, BasicParameterSet<double>& ps) { return box_reg_loss(t.parameter(ps.get("deltas")), refs, a); },
                     std::move(p)});
  }
  return cases;
}

}  // namespace tsdet::testing
