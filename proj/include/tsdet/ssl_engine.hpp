// SPDX-License-Identifier: Apache-2.0
//
// Burn-in on labeled data, then teacher-student mutual learning: the teacher
// labels weak views of unlabeled images, the student trains on strong views
// of both streams, and the teacher follows the student by EMA.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsdet/augment.hpp"
#include "tsdet/detector.hpp"
#include "tsdet/eval.hpp"
#include "tsdet/losses.hpp"
#include "tsdet/synth_data.hpp"

namespace tsdet {

struct TrainConfig {
  double tau = 0.7;
  double lambda_u = 0.2;
  double alpha_ema = 0.9996;
  double gamma = 0.01;  // learning rate
  double momentum = 0.9;
  double nms_iou = 0.5;
  MarginLossConfig margin;
  FocalConfig focal;
  RoiClsKind roi_cls_kind = RoiClsKind::kMargin;
  int batch_labeled = 4;
  int batch_unlabeled = 4;
  int burn_in_iters = 500;
  int mutual_iters = 1000;
  double warmup_fraction = 0.1;
  int eval_every = 100;
  std::uint64_t seed = 0;
  float eval_score_floor = 0.05f;
  int eval_max_detections = 100;
  AugmentConfig augment;
};

inline void validate(const TrainConfig& c) {
  if (!(c.tau > 0 && c.tau < 1)) throw ConfigError("train.tau must be in (0, 1)");
  if (!(c.alpha_ema >= 0 && c.alpha_ema < 1)) throw ConfigError("train.alpha_ema must be in [0, 1)");
  if (!(c.lambda_u >= 0)) throw ConfigError("train.lambda_u must be >= 0");
  if (!(c.gamma > 0)) throw ConfigError("train.gamma must be > 0");
  if (!(c.momentum >= 0 && c.momentum < 1)) throw ConfigError("train.momentum must be in [0, 1)");
  if (!(c.nms_iou > 0 && c.nms_iou < 1)) throw ConfigError("train.nms_iou must be in (0, 1)");
  if (c.batch_labeled < 1) throw ConfigError("train.batch_labeled must be >= 1");
  if (c.batch_unlabeled < 0) throw ConfigError("train.batch_unlabeled must be >= 0");
  if (c.burn_in_iters < 0) throw ConfigError("train.burn_in_iters must be >= 0");
  if (c.mutual_iters < 0) throw ConfigError("train.mutual_iters must be >= 0");
  if (!(c.warmup_fraction >= 0 && c.warmup_fraction <= 1)) throw ConfigError("train.warmup_fraction must be in [0, 1]");
  if (c.eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (!(c.eval_score_floor >= 0 && c.eval_score_floor < 1)) throw ConfigError("train.eval_score_floor must be in [0, 1)");
  if (c.eval_max_detections < 1) throw ConfigError("train.eval_max_detections must be >= 1");
  validate(c.margin);
}

inline LossOptions loss_options(const TrainConfig& t, const DetectorConfig& d) {
  LossOptions o;
  o.roi_cls = t.roi_cls_kind;
  o.margin = t.margin;
  o.focal = t.focal;
  o.rpn_batch_per_image = d.rpn_batch_per_image;
  o.rpn_pos_fraction = d.rpn_pos_fraction;
  return o;
}

// Linear warmup from gamma/warmup_iters to gamma over the first
// warmup_fraction of `total` iterations, constant afterwards.
inline double warmup_learning_rate(int iter, int total, double gamma, double warmup_fraction) {
  const int warm = static_cast<int>(std::floor(warmup_fraction * total));
  if (iter >= warm) return gamma;
  return gamma * (iter + 1) / warm;
}

// Plain SGD, optionally with heavy-ball momentum. Descent: theta -= lr * v.
class Sgd {
 public:
  explicit Sgd(double momentum = 0.0) : momentum_(momentum) {}

  void step(ParameterSet& params, double lr) {
    if (momentum_ > 0 && velocity_.size() == 0) velocity_ = params.clone();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params.at(i);
      if (!p.has_grad()) continue;
      if (momentum_ > 0) {
        auto& v = velocity_.at(i).data;
        if (first_) std::copy(p.grad.begin(), p.grad.end(), v.begin());
        else
          for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(momentum_ * v[k] + p.grad[k]);
        for (std::size_t k = 0; k < v.size(); ++k) p.data[k] -= static_cast<float>(lr * v[k]);
      } else {
        for (std::size_t k = 0; k < p.data.size(); ++k) p.data[k] -= static_cast<float>(lr * p.grad[k]);
      }
    }
    first_ = false;
  }

 private:
  double momentum_;
  bool first_ = true;
  ParameterSet velocity_;
};

// Cycles through shuffled indices, reshuffling at each epoch boundary.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {
    if (n == 0) throw DomainError("BatchSampler: empty dataset");
  }

  std::vector<std::size_t> next(int k) {
    std::vector<std::size_t> out;
    for (int i = 0; i < k; ++i) {
      if (pos_ == order_.size()) {
        order_.resize(n_);
        for (std::size_t j = 0; j < n_; ++j) order_[j] = j;
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline void require_finite(double v, const std::string& what, int iter) {
  if (!std::isfinite(v)) throw NumericError("non-finite " + what + " at iteration " + std::to_string(iter));
}

struct LossValues {
  double rpn_cls = 0, rpn_reg = 0, roi_cls = 0, roi_reg = 0, total = 0;

  template <typename Real>
  static LossValues of(const LossBreakdown<Real>& b) {
    return {double(b.rpn_cls.item()), double(b.rpn_reg.item()), double(b.roi_cls.item()), double(b.roi_reg.item()), double(b.total.item())};
  }
  std::string str() const {
    return "rpn_cls=" + std::to_string(rpn_cls) + " rpn_reg=" + std::to_string(rpn_reg) + " roi_cls=" + std::to_string(roi_cls) +
           " roi_reg=" + std::to_string(roi_reg) + " total=" + std::to_string(total);
  }
};

// ---------------------------------------------------------------------------
// Evaluation helper

inline std::vector<Detection> detect(const ParameterSet& params, const Tensor& image, const DetectorConfig& dcfg, float score_floor,
                                     double nms_iou, int max_detections) {
  auto dets = classwise_nms(predict(params, image, score_floor, dcfg), nms_iou);
  if (static_cast<int>(dets.size()) > max_detections) dets.resize(static_cast<std::size_t>(max_detections));
  return dets;
}

inline EvalResult evaluate_params(const ParameterSet& params, const std::vector<Scene>& scenes, const DetectorConfig& dcfg,
                                  const TrainConfig& tcfg, const EvalConfig& ecfg = {}) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Annotation>> gts;
  for (const auto& s : scenes) {
    dets.push_back(detect(params, s.image, dcfg, tcfg.eval_score_floor, tcfg.nms_iou, tcfg.eval_max_detections));
    gts.push_back(s.annotations);
  }
  return map_summary(dets, gts, dcfg.num_classes, ecfg);
}

// ---------------------------------------------------------------------------
// Burn-in

struct IterationRecord {
  int iteration = 0;  // 1-based count of completed steps in the phase
  double learning_rate = 0;
  LossValues supervised;
  LossValues unsupervised;
  double pseudo_labels_per_image = 0;
  bool unsupervised_skipped = true;
};

// Called after every completed step; iteration 0 is reported before the first
// step with params untouched.
using BurnInCallback = std::function<void(int iteration, const ParameterSet& params, const IterationRecord* last)>;
// Receives the live parameters when a step aborts on a non-finite value,
// before the exception propagates.
using AbortHook = std::function<void(const ParameterSet& params, const std::string& role)>;

namespace engine_detail {

inline std::vector<const Tensor*> image_ptrs(const std::vector<AugmentedScene>& v) {
  std::vector<const Tensor*> out;
  for (const auto& s : v) out.push_back(&s.image);
  return out;
}

inline std::vector<std::vector<Annotation>> targets_of(const std::vector<AugmentedScene>& v) {
  std::vector<std::vector<Annotation>> out;
  for (const auto& s : v) out.push_back(s.annotations);
  return out;
}

}  // namespace engine_detail

// Supervised loss on a prepared batch; accumulates gradients into `params`.
inline LossValues supervised_backward(ParameterSet& params, const std::vector<AugmentedScene>& batch, const DetectorConfig& dcfg,
                                      const LossOptions& opt, Rng& rng) {
  Tape tape;
  const auto v = bind_params(tape, params, dcfg);
  const auto out = forward_for_training(tape, v, engine_detail::image_ptrs(batch), engine_detail::targets_of(batch), dcfg, rng);
  const auto b = supervised_loss(out, opt, rng);
  const auto values = LossValues::of(b);
  if (std::isfinite(values.total)) tape.backward(b.total);
  return values;
}

// Strongly augmented supervised SGD for `iters` steps.
inline ParameterSet burn_in(const ParameterSet& init, const std::vector<Scene>& labeled, const DetectorConfig& dcfg, const TrainConfig& tcfg,
                            int iters, const BurnInCallback& cb = {}, const AbortHook& on_abort = {}) {
  validate(tcfg);
  if (labeled.empty()) throw DomainError("burn_in: labeled set is empty");
  ParameterSet params = init.clone();
  if (cb) cb(0, params, nullptr);
  if (iters == 0) return params;
  BatchSampler sampler(labeled.size(), mix_seed(tcfg.seed, 0xB0));
  Rng aug_rng(mix_seed(tcfg.seed, 0xB1));
  Rng loss_rng(mix_seed(tcfg.seed, 0xB2));
  Sgd sgd(tcfg.momentum);
  const auto opt = loss_options(tcfg, dcfg);
  for (int it = 0; it < iters; ++it) {
    std::vector<AugmentedScene> batch;
    for (auto i : sampler.next(tcfg.batch_labeled)) batch.push_back(strong_augment(labeled[i], aug_rng, tcfg.augment));
    params.clear_grad();
    IterationRecord rec;
    rec.iteration = it + 1;
    rec.learning_rate = warmup_learning_rate(it, iters, tcfg.gamma, tcfg.warmup_fraction);
    try {
      rec.supervised = supervised_backward(params, batch, dcfg, opt, loss_rng);
      require_finite(rec.supervised.total, "burn-in loss (" + rec.supervised.str() + ")", it + 1);
    } catch (const NumericError&) {
      if (on_abort) on_abort(params, "burn_in");
      throw;
    }
    sgd.step(params, rec.learning_rate);
    if (cb) cb(it + 1, params, &rec);
  }
  params.clear_grad();
  return params;
}

struct TeacherStudent {
  ParameterSet teacher;
  ParameterSet student;
};

inline TeacherStudent clone_to_teacher_student(const ParameterSet& theta) {
  TeacherStudent ts{theta.clone(), theta.clone()};
  // The teacher is never optimised.
  for (std::size_t i = 0; i < ts.teacher.size(); ++i) ts.teacher.at(i).requires_grad = false;
  return ts;
}

// ---------------------------------------------------------------------------
// Pseudo labels

struct PseudoLabelSet {
  int teacher_iteration = 0;
  std::vector<std::vector<Annotation>> labels;  // per image

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& l : labels) n += l.size();
    return n;
  }
};

// Filters a prediction set: class-wise NMS, then score >= tau, scores dropped.
inline std::vector<Annotation> filter_pseudo_labels(const std::vector<Detection>& predictions, double tau, double nms_iou) {
  std::vector<Annotation> out;
  for (const auto& d : classwise_nms(predictions, nms_iou))
    if (d.score >= tau) out.push_back({d.box, d.class_id});
  return out;
}

inline std::vector<Annotation> generate_pseudo_labels(const ParameterSet& teacher, const Tensor& weak_image, const DetectorConfig& dcfg,
                                                      double tau, double nms_iou) {
  return filter_pseudo_labels(predict(teacher, weak_image, 0.0f, dcfg), tau, nms_iou);
}

// ---------------------------------------------------------------------------
// Student step and EMA

struct StudentStepAudit {
  bool enabled = false;
  int steps_audited = 0;
  int violations = 0;           // steps where a regression-head grad from L_unsup was nonzero
  double max_abs_reg_grad = 0;  // over all audited steps
};

struct StudentBatch {
  std::vector<AugmentedScene> labeled;    // strong views with ground truth
  std::vector<AugmentedScene> unlabeled;  // strong views carrying pseudo labels
};

// One SGD step on L_sup + lambda_u L_unsup. Unlabeled images whose pseudo
// label list is empty contribute nothing. Returns the loss components.
inline IterationRecord student_step(ParameterSet& student, const StudentBatch& batch, const DetectorConfig& dcfg, const TrainConfig& tcfg,
                                    double lr, Sgd& sgd, std::uint64_t step_seed, StudentStepAudit* audit = nullptr, int iteration = 0) {
  IterationRecord rec;
  rec.iteration = iteration;
  rec.learning_rate = lr;
  const auto opt = loss_options(tcfg, dcfg);
  student.clear_grad();

  std::vector<const Tensor*> u_images;
  std::vector<std::vector<Annotation>> u_targets;
  std::size_t pl = 0;
  for (const auto& s : batch.unlabeled) {
    pl += s.annotations.size();
    if (s.annotations.empty()) continue;
    u_images.push_back(&s.image);
    u_targets.push_back(s.annotations);
  }
  rec.pseudo_labels_per_image = batch.unlabeled.empty() ? 0.0 : double(pl) / double(batch.unlabeled.size());

  // Unsupervised term first, so its regression-head gradients can be audited
  // on clean buffers.
  if (tcfg.lambda_u > 0 && !u_images.empty()) {
    Rng rng(mix_seed(step_seed, 2));
    Tape tape;
    const auto v = bind_params(tape, student, dcfg);
    const auto out = forward_for_training(tape, v, u_images, u_targets, dcfg, rng);
    const auto b = unsupervised_loss(out, opt, rng);
    rec.unsupervised = LossValues::of(b);
    rec.unsupervised_skipped = false;
    require_finite(rec.unsupervised.total, "unsupervised loss (" + rec.unsupervised.str() + ")", iteration);
    tape.backward(ops::scale(b.total, static_cast<float>(tcfg.lambda_u)));
    if (audit && audit->enabled) {
      bool bad = false;
      for (std::size_t i = 0; i < student.size(); ++i) {
        if (!is_regression_param(student.name(i))) continue;
        for (float g : student.at(i).grad) {
          audit->max_abs_reg_grad = std::max(audit->max_abs_reg_grad, double(std::abs(g)));
          bad = bad || g != 0.0f;
        }
      }
      audit->violations += bad;
    }
  }
  if (audit && audit->enabled) ++audit->steps_audited;

  Rng rng(mix_seed(step_seed, 1));
  rec.supervised = supervised_backward(student, batch.labeled, dcfg, opt, rng);
  require_finite(rec.supervised.total, "supervised loss (" + rec.supervised.str() + ")", iteration);
  for (std::size_t i = 0; i < student.size(); ++i)
    for (float g : student.at(i).grad)
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in " + student.name(i) + " at iteration " + std::to_string(iteration) +
                           "; supervised " + rec.supervised.str() + "; unsupervised " + rec.unsupervised.str());
  sgd.step(student, lr);
  student.clear_grad();
  return rec;
}

// theta_T <- alpha theta_T + (1 - alpha) theta_S, evaluated in double.
inline void ema_update(ParameterSet& teacher, const ParameterSet& student, double alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw DomainError("ema_update: alpha must be in [0, 1]");
  teacher.require_congruent(student);
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto& t = teacher.at(i).data;
    const auto& s = student.at(i).data;
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = static_cast<float>(alpha * double(t[k]) + (1.0 - alpha) * double(s[k]));
  }
}

// ---------------------------------------------------------------------------
// Mutual learning

struct MutualCallbacks {
  // After every completed iteration (1-based) and once at iteration 0.
  std::function<void(int iteration, const TeacherStudent& models, const IterationRecord* last)> on_iteration;
  std::function<void(const TeacherStudent& models)> on_abort;
};

struct MutualResult {
  TeacherStudent models;
  std::vector<IterationRecord> history;
  StudentStepAudit audit;
};

struct MutualOptions {
  bool audit_unsupervised_grads = false;
  bool audit_teacher_grads = true;
};

inline MutualResult mutual_learning(TeacherStudent init, const std::vector<Scene>& labeled, const UnlabeledSet& unlabeled,
                                    const DetectorConfig& dcfg, const TrainConfig& tcfg, const MutualCallbacks& cb = {},
                                    const MutualOptions& mopt = {}) {
  validate(tcfg);
  if (labeled.empty()) throw DomainError("mutual_learning: labeled set is empty");
  MutualResult res;
  res.models = std::move(init);
  res.audit.enabled = mopt.audit_unsupervised_grads;
  auto& T = res.models.teacher;
  auto& S = res.models.student;
  T.require_congruent(S);
  if (cb.on_iteration) cb.on_iteration(0, res.models, nullptr);
  if (tcfg.mutual_iters == 0) return res;
  if (unlabeled.empty() && tcfg.batch_unlabeled > 0) throw DomainError("mutual_learning: unlabeled set is empty");

  BatchSampler lab_sampler(labeled.size(), mix_seed(tcfg.seed, 0xC0));
  BatchSampler unl_sampler(std::max<std::size_t>(1, unlabeled.size()), mix_seed(tcfg.seed, 0xC1));
  Rng lab_aug(mix_seed(tcfg.seed, 0xC2));
  Rng unl_aug(mix_seed(tcfg.seed, 0xC3));
  Sgd sgd(tcfg.momentum);
  for (int it = 0; it < tcfg.mutual_iters; ++it) {
    StudentBatch batch;
    for (auto i : lab_sampler.next(tcfg.batch_labeled)) batch.labeled.push_back(strong_augment(labeled[i], lab_aug, tcfg.augment));
    if (tcfg.batch_unlabeled > 0) {
      for (auto i : unl_sampler.next(tcfg.batch_unlabeled)) {
        AugmentedScene view = weak_augment(unlabeled.image_scene(i), unl_aug, tcfg.augment);
        view.annotations = generate_pseudo_labels(T, view.image, dcfg, tcfg.tau, tcfg.nms_iou);
        photometric_augment(view, unl_aug, tcfg.augment);
        batch.unlabeled.push_back(std::move(view));
      }
    }
    IterationRecord rec;
    try {
      rec = student_step(S, batch, dcfg, tcfg, tcfg.gamma, sgd, mix_seed(tcfg.seed, 0xD000000ull + static_cast<std::uint64_t>(it)), &res.audit,
                         it + 1);
    } catch (const NumericError&) {
      if (cb.on_abort) cb.on_abort(res.models);
      throw;
    }
    ema_update(T, S, tcfg.alpha_ema);
    if (mopt.audit_teacher_grads)
      for (std::size_t i = 0; i < T.size(); ++i)
        if (T.at(i).has_grad()) throw Error("teacher parameter " + T.name(i) + " received a gradient");
    res.history.push_back(rec);
    if (cb.on_iteration) cb.on_iteration(it + 1, res.models, &res.history.back());
  }
  return res;
}

}  // namespace tsdet
