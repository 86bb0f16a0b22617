// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: RPN objectness and box losses, three interchangeable
// ROI classifiers, and the supervised / unsupervised breakdowns built on top.
#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "tsdet/detector.hpp"
#include "tsdet/random.hpp"
#include "tsdet/tensor.hpp"

namespace tsdet {

enum class RoiClsKind { kMargin, kCrossEntropy, kFocal };

inline const char* roi_cls_name(RoiClsKind k) {
  switch (k) {
    case RoiClsKind::kMargin: return "margin";
    case RoiClsKind::kCrossEntropy: return "ce";
    case RoiClsKind::kFocal: return "focal";
  }
  return "?";
}

inline RoiClsKind parse_roi_cls(const std::string& s) {
  if (s == "margin") return RoiClsKind::kMargin;
  if (s == "ce") return RoiClsKind::kCrossEntropy;
  if (s == "focal") return RoiClsKind::kFocal;
  throw ConfigError("roi_cls_kind must be one of margin, ce, focal; got '" + s + "'");
}

struct MarginLossConfig {
  double s = 5.0;      // smoothness
  double sigma = 0.5;  // margin
  double w_l = 1.0;    // loss weight
};

inline void validate(const MarginLossConfig& c) {
  if (!(c.s > 0)) throw ConfigError("loss.s must be > 0");
  if (!(c.sigma >= 0)) throw ConfigError("loss.sigma must be >= 0");
  if (!(c.w_l > 0)) throw ConfigError("loss.w_l must be > 0");
}

struct FocalConfig {
  double gamma = 2.0;
  double alpha = 0.25;
};

template <typename Real>
BasicVar<Real> zero_scalar(BasicTape<Real>& tape) {
  return tape.constant(BasicTensor<Real>::scalar(Real(0)));
}

struct RpnSampleCounts {
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

// Mean binary cross-entropy on up to `sample_size` anchors, aiming for
// `pos_fraction` positives; ignored anchors never enter.
template <typename Real>
BasicVar<Real> rpn_cls_loss(BasicVar<Real> logits, const MatchAssignment& assign, Rng& rng, int sample_size = 32, double pos_fraction = 0.5,
                            RpnSampleCounts* counts = nullptr) {
  if (logits.numel() != assign.labels.size())
    throw ShapeError("rpn_cls_loss: " + std::to_string(logits.numel()) + " logits for " + std::to_string(assign.labels.size()) + " labels");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < assign.labels.size(); ++i) {
    if (assign.labels[i].kind == MatchLabel::kPositive) pos.push_back(i);
    else if (assign.labels[i].kind == MatchLabel::kNegative) neg.push_back(i);
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  const std::size_t n_pos = std::min(pos.size(), static_cast<std::size_t>(sample_size * pos_fraction));
  const std::size_t n_neg = std::min(neg.size(), static_cast<std::size_t>(sample_size) - n_pos);
  pos.resize(n_pos);
  neg.resize(n_neg);
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  if (counts) *counts = {n_pos, n_neg};
  auto& tape = *logits.tape;
  if (n_pos + n_neg == 0) {
    std::fprintf(stderr, "warning: rpn_cls_loss has no positive or negative anchors; loss is zero\n");
    return zero_scalar(tape);
  }
  std::vector<std::size_t> idx(pos);
  idx.insert(idx.end(), neg.begin(), neg.end());
  BasicTensor<Real> target(Shape{static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < n_pos; ++i) target.data[i] = Real(1);
  const int m = static_cast<int>(idx.size());
  auto x = ops::gather(logits, std::move(idx), {m});
  // BCE with logits: softplus(x) - y x
  return ops::mean(ops::sub(ops::softplus(x), ops::mul(x, tape.constant(std::move(target)))));
}

// Mean smooth-L1 over the 4 coordinates of every positive; zero without
// positives. `refs` are the anchors or proposals the deltas are relative to.
template <typename Real>
BasicVar<Real> box_reg_loss(BasicVar<Real> deltas, const std::vector<Box>& refs, const MatchAssignment& assign) {
  if (deltas.numel() != refs.size() * 4 || refs.size() != assign.labels.size())
    throw ShapeError("box_reg_loss: deltas " + shape_str(deltas.shape()) + " vs " + std::to_string(refs.size()) + " reference boxes");
  std::vector<std::size_t> idx;
  std::vector<Real> targets;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (assign.labels[i].kind != MatchLabel::kPositive) continue;
    const Deltas t = encode_deltas(refs[i], assign.labels[i].target);
    for (int k = 0; k < 4; ++k) {
      idx.push_back(i * 4 + static_cast<std::size_t>(k));
      targets.push_back(static_cast<Real>(t[static_cast<std::size_t>(k)]));
    }
  }
  auto& tape = *deltas.tape;
  if (idx.empty()) return zero_scalar(tape);
  const int n = static_cast<int>(idx.size());
  auto pred = ops::gather(deltas, std::move(idx), {n});
  auto tgt = tape.constant(BasicTensor<Real>(Shape{n}, std::move(targets)));
  return ops::mean(ops::smooth_l1(pred, tgt));
}

// Row labels for ROI classification: positives take their class, everything
// else the background index.
inline std::vector<int> roi_labels(const MatchAssignment& assign, int num_classes) {
  std::vector<int> out;
  out.reserve(assign.labels.size());
  for (const auto& l : assign.labels) out.push_back(l.kind == MatchLabel::kPositive ? l.class_id : num_classes);
  return out;
}

namespace loss_detail {

template <typename Real>
void check_logits(const char* op, BasicVar<Real> logits, const MatchAssignment& assign) {
  if (logits.shape().size() != 2 || static_cast<std::size_t>(logits.shape()[0]) != assign.labels.size())
    throw ShapeError(std::string(op) + ": logits " + shape_str(logits.shape()) + " for " + std::to_string(assign.labels.size()) + " labels");
}

template <typename Real>
BasicVar<Real> picked_log_probs(BasicVar<Real> logits, const MatchAssignment& assign) {
  const int n = logits.shape()[0], K = logits.shape()[1];
  const auto labels = roi_labels(assign, K - 1);
  std::vector<std::size_t> idx(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) idx[static_cast<std::size_t>(r)] = static_cast<std::size_t>(r) * K + labels[static_cast<std::size_t>(r)];
  return ops::gather(ops::log_softmax_lastdim(logits), std::move(idx), {n});
}

}  // namespace loss_detail

template <typename Real>
BasicVar<Real> cross_entropy_roi_loss(BasicVar<Real> logits, const MatchAssignment& assign) {
  loss_detail::check_logits("cross_entropy_roi_loss", logits, assign);
  if (assign.labels.empty()) return zero_scalar(*logits.tape);
  return ops::scale(ops::mean(loss_detail::picked_log_probs(logits, assign)), Real(-1));
}

// Softmax focal loss  -alpha (1 - p_t)^gamma log p_t, averaged over rows.
// alpha is a uniform scale, so gamma = 0, alpha = 1 is cross-entropy.
template <typename Real>
BasicVar<Real> focal_roi_loss(BasicVar<Real> logits, const MatchAssignment& assign, const FocalConfig& cfg = {}) {
  loss_detail::check_logits("focal_roi_loss", logits, assign);
  if (assign.labels.empty()) return zero_scalar(*logits.tape);
  auto logp = loss_detail::picked_log_probs(logits, assign);
  auto one_minus_p = ops::add_scalar(ops::scale(ops::exp(logp), Real(-1)), Real(1));
  auto w = ops::pow_scalar(one_minus_p, static_cast<Real>(cfg.gamma));
  return ops::scale(ops::mean(ops::mul(w, logp)), static_cast<Real>(-cfg.alpha));
}

// w_l * log(1 + exp(s (beta - rho + sigma)) / s), written as
// w_l * softplus(s (beta - rho + sigma) - log s) for stability.
inline double margin_loss_value(double rho, double beta, const MarginLossConfig& cfg) {
  const double z = cfg.s * (beta - rho + cfg.sigma) - std::log(cfg.s);
  return cfg.w_l * (std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))));
}

template <typename Real>
BasicVar<Real> margin_loss_from_stats(BasicVar<Real> rho, BasicVar<Real> beta, const MarginLossConfig& cfg) {
  auto z = ops::add_scalar(ops::scale(ops::sub(beta, rho), static_cast<Real>(cfg.s)), static_cast<Real>(cfg.s * cfg.sigma - std::log(cfg.s)));
  return ops::scale(ops::softplus(z), static_cast<Real>(cfg.w_l));
}

struct MarginStats {
  double rho = 0;
  double beta = 0;
  std::size_t fg_rows = 0;
  std::size_t bg_rows = 0;
  bool skipped = false;
};

// Margin/distance ROI classifier. Each row of logits is squashed by a sigmoid
// and normalised by a softmax over the C+1 entries.
//   rho  = mean over foreground rows of the mass at the assigned class
//   beta = mean over background rows of the mass on foreground classes
//          (1 - mass at the background index)
// Minimising pushes foreground confidence above background-row confusion by
// the margin sigma. Returns zero (flagged in `stats`) when either row set is
// empty.
template <typename Real>
BasicVar<Real> margin_roi_loss(BasicVar<Real> logits, const MatchAssignment& assign, const MarginLossConfig& cfg = {},
                               MarginStats* stats = nullptr) {
  loss_detail::check_logits("margin_roi_loss", logits, assign);
  validate(cfg);
  const int K = logits.shape()[1];
  const int bg = K - 1;
  const auto labels = roi_labels(assign, bg);
  std::vector<std::size_t> fg_idx, bg_idx;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] == bg) bg_idx.push_back(r * static_cast<std::size_t>(K) + static_cast<std::size_t>(bg));
    else fg_idx.push_back(r * static_cast<std::size_t>(K) + static_cast<std::size_t>(labels[r]));
  }
  MarginStats st;
  st.fg_rows = fg_idx.size();
  st.bg_rows = bg_idx.size();
  auto& tape = *logits.tape;
  if (fg_idx.empty() || bg_idx.empty()) {
    st.skipped = true;
    if (stats) *stats = st;
    return zero_scalar(tape);
  }
  auto probs = ops::softmax_lastdim(ops::sigmoid(logits));
  const int nf = static_cast<int>(fg_idx.size()), nb = static_cast<int>(bg_idx.size());
  auto rho = ops::mean(ops::gather(probs, std::move(fg_idx), {nf}));
  auto beta = ops::add_scalar(ops::scale(ops::mean(ops::gather(probs, std::move(bg_idx), {nb})), Real(-1)), Real(1));
  st.rho = static_cast<double>(rho.item());
  st.beta = static_cast<double>(beta.item());
  if (stats) *stats = st;
  return margin_loss_from_stats(rho, beta, cfg);
}

template <typename Real>
BasicVar<Real> roi_cls_loss(BasicVar<Real> logits, const MatchAssignment& assign, RoiClsKind kind, const MarginLossConfig& margin,
                            const FocalConfig& focal = {}, MarginStats* stats = nullptr) {
  switch (kind) {
    case RoiClsKind::kMargin: return margin_roi_loss(logits, assign, margin, stats);
    case RoiClsKind::kCrossEntropy: return cross_entropy_roi_loss(logits, assign);
    case RoiClsKind::kFocal: return focal_roi_loss(logits, assign, focal);
  }
  throw ConfigError("unknown roi classifier");
}

// ---------------------------------------------------------------------------
// Batch forward

// Everything the losses need for a batch of images, with anchors and ROI rows
// concatenated across images in batch order.
template <typename Real>
struct DetectorOutputs {
  int images = 0;
  std::size_t target_boxes = 0;
  BasicVar<Real> rpn_objectness;  // [B * anchors]
  BasicVar<Real> rpn_deltas;      // [B * anchors, 4]
  std::vector<Box> anchors;
  MatchAssignment rpn_assign;
  BasicVar<Real> roi_logits;  // [R, C+1]
  BasicVar<Real> roi_deltas;  // [R, 4]
  std::vector<Box> roi_boxes;
  MatchAssignment roi_assign;
};

// Keeps at most floor(batch * pos_fraction) positives and fills up to `batch`
// with negatives, both drawn at random; ignored rows are dropped. Returned
// indices are ascending.
inline std::vector<std::size_t> sample_rows(const MatchAssignment& a, int batch, double pos_fraction, Rng& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    if (a.labels[i].kind == MatchLabel::kPositive) pos.push_back(i);
    else if (a.labels[i].kind == MatchLabel::kNegative) neg.push_back(i);
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  pos.resize(std::min(pos.size(), static_cast<std::size_t>(batch * pos_fraction)));
  neg.resize(std::min(neg.size(), static_cast<std::size_t>(batch) - pos.size()));
  pos.insert(pos.end(), neg.begin(), neg.end());
  std::sort(pos.begin(), pos.end());
  return pos;
}

// Runs the detector on every image and matches anchors and ROI rows against
// `targets` (ground truth or pseudo labels). Target boxes are appended to the
// proposals of their image, then ROI rows are subsampled per image before the
// head runs.
template <typename Real>
DetectorOutputs<Real> forward_for_training(BasicTape<Real>& tape, const DetectorVars<Real>& v, const std::vector<const Tensor*>& images,
                                           const std::vector<std::vector<Annotation>>& targets, const DetectorConfig& cfg, Rng& rng) {
  if (images.size() != targets.size() || images.empty()) throw ShapeError("forward_for_training: need one target list per image");
  DetectorOutputs<Real> out;
  out.images = static_cast<int>(images.size());
  const auto anchors = make_anchors(cfg);
  std::vector<BasicVar<Real>> obj, del, logits, deltas;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto feat = backbone_forward(tape, v, *images[i], cfg);
    auto rpn = rpn_forward(v, feat, cfg);
    obj.push_back(rpn.objectness);
    del.push_back(rpn.deltas);
    out.anchors.insert(out.anchors.end(), anchors.begin(), anchors.end());
    out.rpn_assign.append(match(anchors, targets[i], rpn_match_params(cfg)));

    auto props = select_proposals(rpn, cfg, cfg.max_proposals, cfg.proposal_nms);
    std::vector<Box> boxes = props.boxes;
    for (const auto& t : targets[i]) boxes.push_back(t.box);
    out.target_boxes += targets[i].size();
    const auto assign = match(boxes, targets[i], roi_match_params(cfg));
    const auto keep = sample_rows(assign, cfg.roi_batch_per_image, cfg.roi_pos_fraction, rng);
    if (keep.empty()) continue;
    std::vector<Box> kept;
    for (auto k : keep) {
      kept.push_back(boxes[k]);
      out.roi_assign.labels.push_back(assign.labels[k]);
    }
    auto roi = roi_forward(v, feat, kept, cfg);
    logits.push_back(roi.logits);
    deltas.push_back(roi.deltas);
    out.roi_boxes.insert(out.roi_boxes.end(), kept.begin(), kept.end());
  }
  out.rpn_objectness = ops::concat0(obj);
  out.rpn_deltas = ops::concat0(del);
  if (!logits.empty()) {
    out.roi_logits = ops::concat0(logits);
    out.roi_deltas = ops::concat0(deltas);
  }
  return out;
}

template <typename Real>
struct LossBreakdown {
  BasicVar<Real> rpn_cls, rpn_reg, roi_cls, roi_reg, total;
  std::size_t rpn_positives = 0, rpn_negatives = 0;
  std::size_t roi_foreground = 0, roi_background = 0;
  bool roi_cls_skipped = false;
};

struct LossOptions {
  RoiClsKind roi_cls = RoiClsKind::kMargin;
  MarginLossConfig margin;
  FocalConfig focal;
  int rpn_batch_per_image = 32;
  double rpn_pos_fraction = 0.5;
};

namespace loss_detail {

template <typename Real>
LossBreakdown<Real> classification_terms(const DetectorOutputs<Real>& out, const LossOptions& opt, Rng& rng) {
  LossBreakdown<Real> b;
  RpnSampleCounts counts;
  b.rpn_cls = rpn_cls_loss(out.rpn_objectness, out.rpn_assign, rng, opt.rpn_batch_per_image * out.images, opt.rpn_pos_fraction, &counts);
  b.rpn_positives = counts.positives;
  b.rpn_negatives = counts.negatives;
  b.roi_foreground = out.roi_assign.count(MatchLabel::kPositive);
  b.roi_background = out.roi_assign.labels.size() - b.roi_foreground;
  if (out.roi_assign.labels.empty()) {
    b.roi_cls = zero_scalar(*out.rpn_objectness.tape);
    b.roi_cls_skipped = true;
  } else {
    MarginStats ms;
    b.roi_cls = roi_cls_loss(out.roi_logits, out.roi_assign, opt.roi_cls, opt.margin, opt.focal, &ms);
    b.roi_cls_skipped = opt.roi_cls == RoiClsKind::kMargin && ms.skipped;
  }
  return b;
}

}  // namespace loss_detail

// Sum of the four detection terms with unit weights, summed in the order
// rpn_cls + rpn_reg + roi_cls + roi_reg.
template <typename Real>
LossBreakdown<Real> supervised_loss(const DetectorOutputs<Real>& out, const LossOptions& opt, Rng& rng) {
  auto b = loss_detail::classification_terms(out, opt, rng);
  auto& tape = *out.rpn_objectness.tape;
  b.rpn_reg = box_reg_loss(out.rpn_deltas, out.anchors, out.rpn_assign);
  b.roi_reg = out.roi_assign.labels.empty() ? zero_scalar(tape) : box_reg_loss(out.roi_deltas, out.roi_boxes, out.roi_assign);
  b.total = ops::add(ops::add(ops::add(b.rpn_cls, b.rpn_reg), b.roi_cls), b.roi_reg);
  return b;
}

// Classification terms only, computed against pseudo labels as hard targets.
// Box-regression terms are identically zero and never touch the tape's
// regression outputs. A batch without any pseudo label contributes zero.
template <typename Real>
LossBreakdown<Real> unsupervised_loss(const DetectorOutputs<Real>& out, const LossOptions& opt, Rng& rng) {
  auto& tape = *out.rpn_objectness.tape;
  if (out.target_boxes == 0) {
    LossBreakdown<Real> z;
    z.rpn_cls = z.rpn_reg = z.roi_cls = z.roi_reg = z.total = zero_scalar(tape);
    z.roi_cls_skipped = true;
    return z;
  }
  auto b = loss_detail::classification_terms(out, opt, rng);
  b.rpn_reg = zero_scalar(tape);
  b.roi_reg = zero_scalar(tape);
  b.total = ops::add(b.rpn_cls, b.roi_cls);
  return b;
}

}  // namespace tsdet
