// SPDX-License-Identifier: Apache-2.0
//
// A deliberately small two-stage detector:
//   backbone  3 x [conv3x3 stride 2 + relu]           96x96x3 -> F x 12 x 12
//   rpn       conv3x3 + relu, then 1x1 objectness and 1x1 box deltas for a
//             few square anchor sizes per feature cell
//   roi head  nearest-neighbour grid crop of the backbone features per
//             proposal -> fc + relu -> class logits (C+1, index C is
//             background) and class-agnostic box deltas
// Proposals are treated as constants: gradients reach the features through
// the crop but not the proposal coordinates.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tsdet/error.hpp"
#include "tsdet/geometry.hpp"
#include "tsdet/parameters.hpp"
#include "tsdet/random.hpp"
#include "tsdet/tensor.hpp"

namespace tsdet {

struct DetectorConfig {
  int num_classes = 7;
  int image_height = 96;
  int image_width = 96;
  std::vector<int> backbone_channels{8, 16, 32};
  int rpn_hidden = 32;
  std::vector<int> anchor_sizes{16, 32, 48};  // square anchors per cell
  int roi_grid = 3;
  int roi_hidden = 64;
  int max_proposals = 32;
  double proposal_nms = 0.7;
  double rpn_pos_iou = 0.5;
  double rpn_neg_iou = 0.3;
  double roi_pos_iou = 0.5;
  int rpn_batch_per_image = 32;
  double rpn_pos_fraction = 0.5;
  int roi_batch_per_image = 16;
  double roi_pos_fraction = 0.25;

  int stride() const { return 1 << static_cast<int>(backbone_channels.size()); }
  int grid_h() const { return image_height / stride(); }
  int grid_w() const { return image_width / stride(); }
  int cells() const { return grid_h() * grid_w(); }
  int anchors_per_cell() const { return static_cast<int>(anchor_sizes.size()); }
  int num_anchors() const { return cells() * anchors_per_cell(); }
  int features() const { return backbone_channels.back(); }
  int background() const { return num_classes; }
};

inline void validate(const DetectorConfig& c) {
  if (c.num_classes < 1) throw ConfigError("detector.num_classes must be >= 1");
  if (c.backbone_channels.empty()) throw ConfigError("detector.backbone_channels needs at least one layer");
  for (int ch : c.backbone_channels)
    if (ch < 1) throw ConfigError("detector.backbone_channels must be positive");
  if (c.image_height < 1 || c.image_width < 1 || c.image_height % c.stride() || c.image_width % c.stride())
    throw ConfigError("detector.image_height/image_width must be positive multiples of the backbone stride " + std::to_string(c.stride()));
  if (c.rpn_hidden < 1) throw ConfigError("detector.rpn_hidden must be >= 1");
  if (c.roi_hidden < 1) throw ConfigError("detector.roi_hidden must be >= 1");
  if (c.roi_grid < 1) throw ConfigError("detector.roi_grid must be >= 1");
  if (c.anchor_sizes.empty()) throw ConfigError("detector.anchor_sizes must not be empty");
  for (int a : c.anchor_sizes)
    if (a < 1) throw ConfigError("detector.anchor_sizes must be positive");
  if (c.max_proposals < 1 || c.max_proposals > c.num_anchors())
    throw ConfigError("detector.max_proposals must be in [1, " + std::to_string(c.num_anchors()) + "]");
  if (!(c.proposal_nms > 0 && c.proposal_nms < 1)) throw ConfigError("detector.proposal_nms must be in (0, 1)");
  if (!(c.rpn_neg_iou > 0 && c.rpn_neg_iou <= c.rpn_pos_iou && c.rpn_pos_iou <= 1))
    throw ConfigError("detector.rpn_neg_iou/rpn_pos_iou must satisfy 0 < neg <= pos <= 1");
  if (!(c.roi_pos_iou > 0 && c.roi_pos_iou <= 1)) throw ConfigError("detector.roi_pos_iou must be in (0, 1]");
  if (c.rpn_batch_per_image < 1) throw ConfigError("detector.rpn_batch_per_image must be >= 1");
  if (c.roi_batch_per_image < 1) throw ConfigError("detector.roi_batch_per_image must be >= 1");
  if (!(c.rpn_pos_fraction > 0 && c.rpn_pos_fraction <= 1)) throw ConfigError("detector.rpn_pos_fraction must be in (0, 1]");
  if (!(c.roi_pos_fraction > 0 && c.roi_pos_fraction <= 1)) throw ConfigError("detector.roi_pos_fraction must be in (0, 1]");
}

// Layers followed by relu: He-uniform, bound sqrt(6 / fan_in). Output heads:
// uniform with standard deviation 0.01. Biases start at zero.
inline ParameterSet init_detector_params(const DetectorConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(mix_seed(seed, 0xDE7EC7));
  ParameterSet p;
  auto layer = [&](const std::string& base, Shape wshape, int out, double bound) {
    Tensor w(std::move(wshape));
    for (auto& v : w.data) v = static_cast<float>(rng.uniform(-bound, bound));
    p.add(base + ".weight", std::move(w));
    p.add(base + ".bias", Tensor(Shape{out}));
  };
  auto hidden = [](int fan_in) { return std::sqrt(6.0 / fan_in); };
  const double head = 0.01 * std::sqrt(3.0);
  int in = 3;
  for (std::size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
    const int out = cfg.backbone_channels[i];
    layer("backbone.conv" + std::to_string(i + 1), {out, in, 3, 3}, out, hidden(in * 9));
    in = out;
  }
  const int F = cfg.features();
  const int A = cfg.anchors_per_cell();
  layer("rpn.conv", {cfg.rpn_hidden, F, 3, 3}, cfg.rpn_hidden, hidden(F * 9));
  layer("rpn.objectness", {A, cfg.rpn_hidden, 1, 1}, A, head);
  layer("rpn.deltas", {4 * A, cfg.rpn_hidden, 1, 1}, 4 * A, head);
  const int crop = F * cfg.roi_grid * cfg.roi_grid;
  layer("roi.fc", {crop, cfg.roi_hidden}, cfg.roi_hidden, hidden(crop));
  layer("roi.cls", {cfg.roi_hidden, cfg.num_classes + 1}, cfg.num_classes + 1, head);
  layer("roi.reg", {cfg.roi_hidden, 4}, 4, head);
  return p;
}

// Box-regression parameters; the unsupervised objective must never reach them.
inline bool is_regression_param(const std::string& name) {
  return name.rfind("rpn.deltas.", 0) == 0 || name.rfind("roi.reg.", 0) == 0;
}

// Parameters bound to a tape. Trainable sets are leaves that receive grads;
// frozen sets (the teacher) enter as constants.
template <typename Real>
struct DetectorVars {
  using V = BasicVar<Real>;
  std::vector<V> conv_w, conv_b;
  V rpn_w, rpn_b, obj_w, obj_b, reg_w, reg_b;
  V fc_w, fc_b, cls_w, cls_b, box_w, box_b;
};

namespace detector_detail {

template <typename Real, typename BindFn>
DetectorVars<Real> bind_with(const DetectorConfig& cfg, BindFn b) {
  DetectorVars<Real> v;
  for (std::size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
    const std::string base = "backbone.conv" + std::to_string(i + 1);
    v.conv_w.push_back(b(base + ".weight"));
    v.conv_b.push_back(b(base + ".bias"));
  }
  v.rpn_w = b("rpn.conv.weight");
  v.rpn_b = b("rpn.conv.bias");
  v.obj_w = b("rpn.objectness.weight");
  v.obj_b = b("rpn.objectness.bias");
  v.reg_w = b("rpn.deltas.weight");
  v.reg_b = b("rpn.deltas.bias");
  v.fc_w = b("roi.fc.weight");
  v.fc_b = b("roi.fc.bias");
  v.cls_w = b("roi.cls.weight");
  v.cls_b = b("roi.cls.bias");
  v.box_w = b("roi.reg.weight");
  v.box_b = b("roi.reg.bias");
  return v;
}

}  // namespace detector_detail

template <typename Real>
DetectorVars<Real> bind_params(BasicTape<Real>& tape, BasicParameterSet<Real>& params, const DetectorConfig& cfg) {
  return detector_detail::bind_with<Real>(cfg, [&](const std::string& name) { return tape.parameter(params.get(name)); });
}

template <typename Real>
DetectorVars<Real> bind_constants(BasicTape<Real>& tape, const BasicParameterSet<Real>& params, const DetectorConfig& cfg) {
  return detector_detail::bind_with<Real>(cfg, [&](const std::string& name) {
    const auto& t = params.get(name);
    return tape.constant(BasicTensor<Real>(t.shape, t.data));
  });
}

// image: [H, W, 3] in [0, 1], fed as 2x - 1. Returns features
// [1, F, H/stride, W/stride].
template <typename Real>
BasicVar<Real> backbone_forward(BasicTape<Real>& tape, const DetectorVars<Real>& v, const Tensor& image, const DetectorConfig& cfg) {
  if (image.rank() != 3 || image.shape[0] != cfg.image_height || image.shape[1] != cfg.image_width || image.shape[2] != 3)
    throw ShapeError("backbone_forward: expected image [" + std::to_string(cfg.image_height) + "," + std::to_string(cfg.image_width) +
                     ",3], got " + shape_str(image.shape));
  const int H = cfg.image_height, W = cfg.image_width;
  BasicTensor<Real> nchw(Shape{1, 3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int k = 0; k < 3; ++k)
        nchw.data[(static_cast<std::size_t>(k) * H + y) * W + x] = static_cast<Real>(2.0f * image.data[(static_cast<std::size_t>(y) * W + x) * 3 + k] - 1.0f);
  auto h = tape.constant(std::move(nchw));
  for (std::size_t i = 0; i < v.conv_w.size(); ++i) h = ops::relu(ops::conv2d(h, v.conv_w[i], v.conv_b[i], {2, 1}));
  return h;
}

template <typename Real>
struct RpnOutput {
  BasicVar<Real> objectness;  // [cells * A], cell-major, sizes within a cell
  BasicVar<Real> deltas;      // [cells * A, 4]
};

template <typename Real>
RpnOutput<Real> rpn_forward(const DetectorVars<Real>& v, BasicVar<Real> features, const DetectorConfig& cfg) {
  const int cells = cfg.cells(), A = cfg.anchors_per_cell(), n = cells * A;
  auto h = ops::relu(ops::conv2d(features, v.rpn_w, v.rpn_b, {1, 1}));
  auto obj = ops::conv2d(h, v.obj_w, v.obj_b, {1, 0});  // [1, A, gh, gw]
  auto d = ops::conv2d(h, v.reg_w, v.reg_b, {1, 0});    // [1, 4A, gh, gw]
  std::vector<std::size_t> oi(static_cast<std::size_t>(n)), di(static_cast<std::size_t>(n) * 4);
  for (int c = 0; c < cells; ++c)
    for (int a = 0; a < A; ++a) {
      const std::size_t k = static_cast<std::size_t>(c) * A + a;
      oi[k] = static_cast<std::size_t>(a) * cells + c;
      for (int j = 0; j < 4; ++j) di[k * 4 + j] = static_cast<std::size_t>(4 * a + j) * cells + c;
    }
  return {ops::gather(obj, std::move(oi), {n}), ops::gather(d, std::move(di), {n, 4})};
}

// Per cell (row-major), one square anchor per size, centred on the cell.
inline std::vector<Box> make_anchors(const DetectorConfig& cfg) {
  std::vector<Box> anchors;
  const float s = static_cast<float>(cfg.stride());
  for (int r = 0; r < cfg.grid_h(); ++r)
    for (int c = 0; c < cfg.grid_w(); ++c) {
      const float cx = (c + 0.5f) * s, cy = (r + 0.5f) * s;
      for (int size : cfg.anchor_sizes) {
        const float half = 0.5f * static_cast<float>(size);
        anchors.push_back({cx - half, cy - half, cx + half, cy + half});
      }
    }
  return anchors;
}

struct ProposalBatch {
  std::vector<Box> boxes;
  std::vector<float> scores;  // objectness logits
  std::vector<int> anchors;   // originating anchor index
};

inline constexpr float kMinProposalSide = 1.0f;

// Decode every anchor, clip, drop boxes thinner than a pixel, NMS on
// objectness, keep the top k. Ties go to the lower anchor index.
inline ProposalBatch select_proposals(const std::vector<float>& objectness, const std::vector<float>& deltas, const DetectorConfig& cfg,
                                      int k, double nms_iou) {
  const auto anchors = make_anchors(cfg);
  if (objectness.size() != anchors.size() || deltas.size() != anchors.size() * 4)
    throw ShapeError("select_proposals: rpn output does not match the anchor grid");
  if (k < 1 || k > static_cast<int>(anchors.size())) throw DomainError("select_proposals: k out of range");
  std::vector<Box> boxes;
  std::vector<float> scores;
  std::vector<int> origin;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Deltas d{deltas[i * 4], deltas[i * 4 + 1], deltas[i * 4 + 2], deltas[i * 4 + 3]};
    const Box b = decode_deltas(anchors[i], d, static_cast<float>(cfg.image_width), static_cast<float>(cfg.image_height));
    if (!b.valid() || b.width() < kMinProposalSide || b.height() < kMinProposalSide) continue;
    boxes.push_back(b);
    scores.push_back(objectness[i]);
    origin.push_back(static_cast<int>(i));
  }
  const auto kept = nms_indices(boxes, score_order(scores), nms_iou);
  ProposalBatch out;
  for (std::size_t j = 0; j < kept.size() && static_cast<int>(j) < k; ++j) {
    out.boxes.push_back(boxes[kept[j]]);
    out.scores.push_back(scores[kept[j]]);
    out.anchors.push_back(origin[kept[j]]);
  }
  return out;
}

template <typename Real>
ProposalBatch select_proposals(const RpnOutput<Real>& rpn, const DetectorConfig& cfg, int k, double nms_iou) {
  std::vector<float> obj(rpn.objectness.value().data.begin(), rpn.objectness.value().data.end());
  std::vector<float> del(rpn.deltas.value().data.begin(), rpn.deltas.value().data.end());
  return select_proposals(obj, del, cfg, k, nms_iou);
}

template <typename Real>
struct RoiOutput {
  BasicVar<Real> logits;  // [n, C+1]
  BasicVar<Real> deltas;  // [n, 4]
};

// Flat feature indices of the nearest-neighbour crop, laid out [n, F, g, g].
inline std::vector<std::size_t> roi_crop_indices(const std::vector<Box>& boxes, const DetectorConfig& cfg) {
  const int F = cfg.features(), gh = cfg.grid_h(), gw = cfg.grid_w(), g = cfg.roi_grid;
  const double s = cfg.stride();
  std::vector<std::size_t> idx;
  idx.reserve(boxes.size() * static_cast<std::size_t>(F * g * g));
  std::vector<std::size_t> cell(static_cast<std::size_t>(g * g));
  for (const auto& b : boxes) {
    for (int i = 0; i < g; ++i)
      for (int j = 0; j < g; ++j) {
        const double py = b.y1 + (i + 0.5) * b.height() / g;
        const double px = b.x1 + (j + 0.5) * b.width() / g;
        const int cy = std::clamp(static_cast<int>(std::floor(py / s)), 0, gh - 1);
        const int cx = std::clamp(static_cast<int>(std::floor(px / s)), 0, gw - 1);
        cell[static_cast<std::size_t>(i * g + j)] = static_cast<std::size_t>(cy * gw + cx);
      }
    for (int c = 0; c < F; ++c)
      for (std::size_t q = 0; q < cell.size(); ++q) idx.push_back(static_cast<std::size_t>(c) * gh * gw + cell[q]);
  }
  return idx;
}

template <typename Real>
RoiOutput<Real> roi_forward(const DetectorVars<Real>& v, BasicVar<Real> features, const std::vector<Box>& boxes, const DetectorConfig& cfg) {
  if (boxes.empty()) throw DomainError("roi_forward: empty proposal batch");
  const int n = static_cast<int>(boxes.size());
  const int width = cfg.features() * cfg.roi_grid * cfg.roi_grid;
  auto crop = ops::gather(features, roi_crop_indices(boxes, cfg), {n, width});
  auto h = ops::relu(ops::add(ops::matmul(crop, v.fc_w), v.fc_b));
  return {ops::add(ops::matmul(h, v.cls_w), v.cls_b), ops::add(ops::matmul(h, v.box_w), v.box_b)};
}

// ---------------------------------------------------------------------------
// Matching

struct MatchLabel {
  enum Kind { kPositive, kNegative, kIgnore };
  Kind kind = kNegative;
  int class_id = -1;  // valid for positives
  int gt_index = -1;
  Box target;
};

struct MatchAssignment {
  std::vector<MatchLabel> labels;

  std::size_t count(MatchLabel::Kind k) const {
    std::size_t n = 0;
    for (const auto& l : labels) n += l.kind == k;
    return n;
  }
  void append(const MatchAssignment& other) { labels.insert(labels.end(), other.labels.begin(), other.labels.end()); }
};

struct MatchParams {
  double pos_iou = 0.5;
  double neg_iou = 0.5;         // below -> negative; between -> ignore
  bool force_best_anchor = false;  // each GT's best box becomes positive
};

// Positives take the class and box of their best-IoU ground truth (lowest
// index on ties).
inline MatchAssignment match(const std::vector<Box>& boxes, const std::vector<Annotation>& gt, const MatchParams& p) {
  MatchAssignment m;
  m.labels.resize(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    double best = 0;
    int arg = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double o = iou(boxes[i], gt[g].box);
      if (arg < 0 || o > best) best = o, arg = static_cast<int>(g);
    }
    auto& l = m.labels[i];
    if (arg >= 0 && best >= p.pos_iou) {
      l = {MatchLabel::kPositive, gt[static_cast<std::size_t>(arg)].class_id, arg, gt[static_cast<std::size_t>(arg)].box};
    } else if (arg < 0 || best < p.neg_iou) {
      l = {MatchLabel::kNegative, -1, -1, {}};
    } else {
      l = {MatchLabel::kIgnore, -1, -1, {}};
    }
  }
  if (p.force_best_anchor) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      double best = 0;
      int arg = -1;
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        const double o = iou(boxes[i], gt[g].box);
        if (o > best) best = o, arg = static_cast<int>(i);
      }
      if (arg >= 0) m.labels[static_cast<std::size_t>(arg)] = {MatchLabel::kPositive, gt[g].class_id, static_cast<int>(g), gt[g].box};
    }
  }
  return m;
}

inline MatchParams rpn_match_params(const DetectorConfig& c) { return {c.rpn_pos_iou, c.rpn_neg_iou, true}; }
inline MatchParams roi_match_params(const DetectorConfig& c) { return {c.roi_pos_iou, c.roi_pos_iou, false}; }

// ---------------------------------------------------------------------------
// Inference

inline constexpr float kMaxScore = 1.0f - 0x1.0p-24f;

// One detection per (proposal, foreground class) whose softmax probability is
// at least score_floor, ordered by proposal then class. Probabilities are
// capped just below 1 since finite logits never reach certainty. Boxes share
// the class-agnostic refinement of their proposal.
inline std::vector<Detection> predict(const ParameterSet& params, const Tensor& image, float score_floor, const DetectorConfig& cfg) {
  Tape tape;
  const auto v = bind_constants(tape, params, cfg);
  auto feat = backbone_forward(tape, v, image, cfg);
  auto rpn = rpn_forward(v, feat, cfg);
  const auto props = select_proposals(rpn, cfg, cfg.max_proposals, cfg.proposal_nms);
  std::vector<Detection> out;
  if (props.boxes.empty()) return out;
  const auto roi = roi_forward(v, feat, props.boxes, cfg);
  const int K = cfg.num_classes + 1;
  const auto& logits = roi.logits.value().data;
  const auto& deltas = roi.deltas.value().data;
  std::vector<double> prob(static_cast<std::size_t>(K));
  for (std::size_t r = 0; r < props.boxes.size(); ++r) {
    const float* row = &logits[r * K];
    const float top = *std::max_element(row, row + K);
    double z = 0;
    for (int j = 0; j < K; ++j) z += (prob[static_cast<std::size_t>(j)] = std::exp(double(row[j]) - top));
    const Deltas d{deltas[r * 4], deltas[r * 4 + 1], deltas[r * 4 + 2], deltas[r * 4 + 3]};
    const Box b = decode_deltas(props.boxes[r], d, static_cast<float>(cfg.image_width), static_cast<float>(cfg.image_height));
    if (!b.valid() || b.width() <= 0 || b.height() <= 0) continue;
    for (int c = 0; c < cfg.num_classes; ++c) {
      const float score = std::min(kMaxScore, static_cast<float>(prob[static_cast<std::size_t>(c)] / z));
      if (score >= score_floor) out.push_back({b, c, score});
    }
  }
  return out;
}

}  // namespace tsdet
