// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner: configuration, dataset materialisation, training runs
// with CSV metrics, checkpoint evaluation and one-axis ablation sweeps.
//
// A configuration is a JSON document whose leaves are addressed by dot paths
// ("train.tau"). Every key in the file must be known; command-line overrides
// use the same paths.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdet/coco_io.hpp"
#include "tsdet/ssl_engine.hpp"

namespace tsdet {

struct DatasetConfig {
  int n_scenes = 1000;
  double labeled_fraction = 0.05;
  std::uint64_t seed = 7;
  std::string dir;  // empty: generate in memory
  SceneConfig scene;
};

struct AblationValues {
  std::vector<double> tau{0.6, 0.7, 0.8, 0.9};
  std::vector<double> alpha_ema{0.5, 0.99, 0.999, 0.9996, 0.9999};
  std::vector<double> s{3, 4, 5, 6};
  std::vector<std::string> init{"with", "without"};
  std::vector<std::string> loss{"margin", "ce", "focal"};
};

struct ExperimentConfig {
  DatasetConfig dataset;
  DetectorConfig detector;
  TrainConfig train;
  EvalConfig eval;
  AblationValues ablate;
  std::string output_dir = "runs/default";
  int checkpoint_every = 0;  // 0: final checkpoints only
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> overrides;  // recorded --set arguments
};

// ---------------------------------------------------------------------------
// Field registry

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

struct ConfigField {
  std::string path;
  std::function<void(ExperimentConfig&, const json&)> set;
  std::function<ordered_json(const ExperimentConfig&)> get;
};

namespace config_detail {

template <typename T>
T convert(const json& j, const std::string& key);

[[noreturn]] inline void type_error(const std::string& key, const char* want, const json& j) {
  throw ConfigError(key + ": expected " + want + ", got " + j.dump());
}

template <>
inline double convert<double>(const json& j, const std::string& key) {
  if (!j.is_number()) type_error(key, "a number", j);
  return j.get<double>();
}
template <>
inline float convert<float>(const json& j, const std::string& key) {
  return static_cast<float>(convert<double>(j, key));
}
template <>
inline int convert<int>(const json& j, const std::string& key) {
  if (!j.is_number_integer()) type_error(key, "an integer", j);
  const auto v = j.get<long long>();
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) type_error(key, "a 32-bit integer", j);
  return static_cast<int>(v);
}
template <>
inline std::uint64_t convert<std::uint64_t>(const json& j, const std::string& key) {
  if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() && j.get<long long>() < 0))
    type_error(key, "a non-negative integer", j);
  return j.get<std::uint64_t>();
}
template <>
inline std::string convert<std::string>(const json& j, const std::string& key) {
  if (!j.is_string()) type_error(key, "a string", j);
  return j.get<std::string>();
}
template <>
inline RoiClsKind convert<RoiClsKind>(const json& j, const std::string& key) {
  try {
    return parse_roi_cls(convert<std::string>(j, key));
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

template <typename T>
std::vector<T> convert_vector(const json& j, const std::string& key) {
  if (!j.is_array()) type_error(key, "an array", j);
  std::vector<T> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(convert<T>(j[i], key + "[" + std::to_string(i) + "]"));
  return out;
}

template <typename T>
struct Converter {
  static T from(const json& j, const std::string& key) { return convert<T>(j, key); }
  static ordered_json to(const T& v) { return v; }
};
template <typename T>
struct Converter<std::vector<T>> {
  static std::vector<T> from(const json& j, const std::string& key) { return convert_vector<T>(j, key); }
  static ordered_json to(const std::vector<T>& v) { return v; }
};
template <>
struct Converter<RoiClsKind> {
  static RoiClsKind from(const json& j, const std::string& key) { return convert<RoiClsKind>(j, key); }
  static ordered_json to(RoiClsKind v) { return roi_cls_name(v); }
};

// `acc` is a generic lambda returning a reference into the config, usable on
// both const and mutable configs.
template <typename Acc>
ConfigField field(std::string path, Acc acc) {
  using T = std::remove_cvref_t<decltype(acc(std::declval<ExperimentConfig&>()))>;
  return {path, [acc, path](ExperimentConfig& c, const json& j) { acc(c) = Converter<T>::from(j, path); },
          [acc](const ExperimentConfig& c) { return Converter<T>::to(acc(c)); }};
}

}  // namespace config_detail

inline const std::vector<ConfigField>& config_fields() {
  using config_detail::field;
  static const std::vector<ConfigField> fields = {
      field("dataset.n_scenes", [](auto& c) -> auto& { return c.dataset.n_scenes; }),
      field("dataset.labeled_fraction", [](auto& c) -> auto& { return c.dataset.labeled_fraction; }),
      field("dataset.seed", [](auto& c) -> auto& { return c.dataset.seed; }),
      field("dataset.dir", [](auto& c) -> auto& { return c.dataset.dir; }),
      field("dataset.scene.height", [](auto& c) -> auto& { return c.dataset.scene.height; }),
      field("dataset.scene.width", [](auto& c) -> auto& { return c.dataset.scene.width; }),
      field("dataset.scene.num_classes", [](auto& c) -> auto& { return c.dataset.scene.num_classes; }),
      field("dataset.scene.class_weights", [](auto& c) -> auto& { return c.dataset.scene.class_weights; }),
      field("dataset.scene.max_instances", [](auto& c) -> auto& { return c.dataset.scene.max_instances; }),
      field("dataset.scene.min_size", [](auto& c) -> auto& { return c.dataset.scene.min_size; }),
      field("dataset.scene.max_size", [](auto& c) -> auto& { return c.dataset.scene.max_size; }),
      field("dataset.scene.max_rotation_deg", [](auto& c) -> auto& { return c.dataset.scene.max_rotation_deg; }),
      field("dataset.scene.border_occlusion_prob", [](auto& c) -> auto& { return c.dataset.scene.border_occlusion_prob; }),
      field("dataset.scene.noise_std", [](auto& c) -> auto& { return c.dataset.scene.noise_std; }),
      field("dataset.scene.max_pairwise_iou", [](auto& c) -> auto& { return c.dataset.scene.max_pairwise_iou; }),

      field("detector.num_classes", [](auto& c) -> auto& { return c.detector.num_classes; }),
      field("detector.image_height", [](auto& c) -> auto& { return c.detector.image_height; }),
      field("detector.image_width", [](auto& c) -> auto& { return c.detector.image_width; }),
      field("detector.backbone_channels", [](auto& c) -> auto& { return c.detector.backbone_channels; }),
      field("detector.rpn_hidden", [](auto& c) -> auto& { return c.detector.rpn_hidden; }),
      field("detector.anchor_sizes", [](auto& c) -> auto& { return c.detector.anchor_sizes; }),
      field("detector.roi_grid", [](auto& c) -> auto& { return c.detector.roi_grid; }),
      field("detector.roi_hidden", [](auto& c) -> auto& { return c.detector.roi_hidden; }),
      field("detector.max_proposals", [](auto& c) -> auto& { return c.detector.max_proposals; }),
      field("detector.proposal_nms", [](auto& c) -> auto& { return c.detector.proposal_nms; }),
      field("detector.rpn_pos_iou", [](auto& c) -> auto& { return c.detector.rpn_pos_iou; }),
      field("detector.rpn_neg_iou", [](auto& c) -> auto& { return c.detector.rpn_neg_iou; }),
      field("detector.roi_pos_iou", [](auto& c) -> auto& { return c.detector.roi_pos_iou; }),
      field("detector.rpn_batch_per_image", [](auto& c) -> auto& { return c.detector.rpn_batch_per_image; }),
      field("detector.rpn_pos_fraction", [](auto& c) -> auto& { return c.detector.rpn_pos_fraction; }),
      field("detector.roi_batch_per_image", [](auto& c) -> auto& { return c.detector.roi_batch_per_image; }),
      field("detector.roi_pos_fraction", [](auto& c) -> auto& { return c.detector.roi_pos_fraction; }),

      field("train.tau", [](auto& c) -> auto& { return c.train.tau; }),
      field("train.lambda_u", [](auto& c) -> auto& { return c.train.lambda_u; }),
      field("train.alpha_ema", [](auto& c) -> auto& { return c.train.alpha_ema; }),
      field("train.gamma", [](auto& c) -> auto& { return c.train.gamma; }),
      field("train.momentum", [](auto& c) -> auto& { return c.train.momentum; }),
      field("train.nms_iou", [](auto& c) -> auto& { return c.train.nms_iou; }),
      field("train.s", [](auto& c) -> auto& { return c.train.margin.s; }),
      field("train.sigma", [](auto& c) -> auto& { return c.train.margin.sigma; }),
      field("train.w_l", [](auto& c) -> auto& { return c.train.margin.w_l; }),
      field("train.focal_gamma", [](auto& c) -> auto& { return c.train.focal.gamma; }),
      field("train.focal_alpha", [](auto& c) -> auto& { return c.train.focal.alpha; }),
      field("train.roi_cls_kind", [](auto& c) -> auto& { return c.train.roi_cls_kind; }),
      field("train.batch_labeled", [](auto& c) -> auto& { return c.train.batch_labeled; }),
      field("train.batch_unlabeled", [](auto& c) -> auto& { return c.train.batch_unlabeled; }),
      field("train.burn_in_iters", [](auto& c) -> auto& { return c.train.burn_in_iters; }),
      field("train.mutual_iters", [](auto& c) -> auto& { return c.train.mutual_iters; }),
      field("train.warmup_fraction", [](auto& c) -> auto& { return c.train.warmup_fraction; }),
      field("train.eval_every", [](auto& c) -> auto& { return c.train.eval_every; }),
      field("train.seed", [](auto& c) -> auto& { return c.train.seed; }),
      field("train.eval_score_floor", [](auto& c) -> auto& { return c.train.eval_score_floor; }),
      field("train.eval_max_detections", [](auto& c) -> auto& { return c.train.eval_max_detections; }),
      field("train.augment.flip_prob", [](auto& c) -> auto& { return c.train.augment.flip_prob; }),
      field("train.augment.grayscale_prob", [](auto& c) -> auto& { return c.train.augment.grayscale_prob; }),
      field("train.augment.jitter_prob", [](auto& c) -> auto& { return c.train.augment.jitter_prob; }),
      field("train.augment.jitter_min", [](auto& c) -> auto& { return c.train.augment.jitter_min; }),
      field("train.augment.jitter_max", [](auto& c) -> auto& { return c.train.augment.jitter_max; }),
      field("train.augment.blur_prob", [](auto& c) -> auto& { return c.train.augment.blur_prob; }),
      field("train.augment.blur_sigma_min", [](auto& c) -> auto& { return c.train.augment.blur_sigma_min; }),
      field("train.augment.blur_sigma_max", [](auto& c) -> auto& { return c.train.augment.blur_sigma_max; }),
      field("train.augment.cutout_prob", [](auto& c) -> auto& { return c.train.augment.cutout_prob; }),
      field("train.augment.cutout_min_count", [](auto& c) -> auto& { return c.train.augment.cutout_min_count; }),
      field("train.augment.cutout_max_count", [](auto& c) -> auto& { return c.train.augment.cutout_max_count; }),
      field("train.augment.cutout_min_area", [](auto& c) -> auto& { return c.train.augment.cutout_min_area; }),
      field("train.augment.cutout_max_area", [](auto& c) -> auto& { return c.train.augment.cutout_max_area; }),
      field("train.augment.fill_color", [](auto& c) -> auto& { return c.train.augment.fill_color; }),

      field("eval.medium_min", [](auto& c) -> auto& { return c.eval.medium_min; }),
      field("eval.medium_max", [](auto& c) -> auto& { return c.eval.medium_max; }),

      field("ablate.tau", [](auto& c) -> auto& { return c.ablate.tau; }),
      field("ablate.alpha_ema", [](auto& c) -> auto& { return c.ablate.alpha_ema; }),
      field("ablate.s", [](auto& c) -> auto& { return c.ablate.s; }),
      field("ablate.init", [](auto& c) -> auto& { return c.ablate.init; }),
      field("ablate.loss", [](auto& c) -> auto& { return c.ablate.loss; }),

      field("output_dir", [](auto& c) -> auto& { return c.output_dir; }),
      field("checkpoint_every", [](auto& c) -> auto& { return c.checkpoint_every; }),
      field("seeds", [](auto& c) -> auto& { return c.seeds; }),
  };
  return fields;
}

inline const ConfigField& find_field(const std::string& path) {
  for (const auto& f : config_fields())
    if (f.path == path) return f;
  throw ConfigError("unknown config key '" + path + "'");
}

inline void set_config_value(ExperimentConfig& cfg, const std::string& path, const json& value) { find_field(path).set(cfg, value); }

// "key=value"; the value is parsed as JSON when possible, otherwise taken as
// a bare string (so train.roi_cls_kind=ce works unquoted).
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must have the form key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set_config_value(cfg, key, value);
  cfg.overrides.push_back(assignment);
}

inline ordered_json config_to_json(const ExperimentConfig& cfg) {
  ordered_json out = ordered_json::object();
  for (const auto& f : config_fields()) {
    ordered_json* node = &out;
    std::string rest = f.path;
    for (auto dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
      node = &(*node)[rest.substr(0, dot)];
      rest = rest.substr(dot + 1);
    }
    (*node)[rest] = f.get(cfg);
  }
  return out;
}

namespace config_detail {

inline void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  if (j.is_object() && !j.empty()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out.emplace_back(prefix, j);
  }
}

}  // namespace config_detail

inline void validate(const ExperimentConfig& c) {
  split_sizes(c.dataset.n_scenes, c.dataset.labeled_fraction);
  validate(c.dataset.scene);
  validate(c.detector);
  validate(c.train);
  if (c.dataset.scene.height != c.detector.image_height || c.dataset.scene.width != c.detector.image_width)
    throw ConfigError("detector.image_height/image_width must match dataset.scene.height/width");
  if (c.dataset.scene.num_classes != c.detector.num_classes) throw ConfigError("detector.num_classes must match dataset.scene.num_classes");
  if (!(c.eval.medium_min >= 0 && c.eval.medium_max > c.eval.medium_min))
    throw ConfigError("eval.medium_min/medium_max must satisfy 0 <= min < max");
  if (c.checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
  for (double t : c.ablate.tau)
    if (!(t > 0 && t < 1)) throw ConfigError("ablate.tau values must be in (0, 1)");
  for (double a : c.ablate.alpha_ema)
    if (!(a >= 0 && a < 1)) throw ConfigError("ablate.alpha_ema values must be in [0, 1)");
  for (double s : c.ablate.s)
    if (!(s > 0)) throw ConfigError("ablate.s values must be > 0");
  for (const auto& s : c.ablate.init)
    if (s != "with" && s != "without") throw ConfigError("ablate.init values must be 'with' or 'without'");
  for (const auto& s : c.ablate.loss) parse_roi_cls(s);
}

inline ExperimentConfig config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg;
  std::vector<std::pair<std::string, json>> leaves;
  config_detail::flatten(doc, "", leaves);
  for (const auto& [key, value] : leaves) {
    if (key.empty()) continue;
    set_config_value(cfg, key, value);
  }
  return cfg;
}

// Reads the file (if non-empty), applies overrides in order, validates.
inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  ExperimentConfig cfg;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    json doc;
    try {
      doc = json::parse(f);
    } catch (const json::parse_error& e) {
      throw ConfigError(path + ": malformed JSON at byte " + std::to_string(e.byte));
    }
    cfg = config_from_json(doc);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  validate(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// Files

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << text;
  if (!f) throw IoError("failed writing: " + path.string());
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline ordered_json manifest_json(const ExperimentConfig& cfg, const std::string& command) {
  ordered_json m;
  m["command"] = command;
  m["timestamp"] = utc_timestamp();
  m["overrides"] = cfg.overrides;
  m["config"] = config_to_json(cfg);
  return m;
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetFiles {
  static constexpr const char* kLabeled = "train_labeled.json";
  static constexpr const char* kUnlabeled = "train_unlabeled.json";
  static constexpr const char* kHidden = "diagnostics/train_unlabeled_hidden_labels.json";
  static constexpr const char* kVal = "val.json";
  static constexpr const char* kTest = "test.json";
  static constexpr const char* kImages = "images";
  static constexpr const char* kManifest = "manifest.json";
};

inline DatasetSplit generate_dataset(const DatasetConfig& d) {
  return make_splits(d.n_scenes, d.labeled_fraction, d.seed, d.scene);
}

inline std::vector<Scene> unlabeled_scenes_with_hidden_labels(const UnlabeledSet& u) {
  std::vector<Scene> out;
  for (std::size_t i = 0; i < u.size(); ++i) {
    Scene s = u.image_scene(i);
    s.annotations = u.diagnostic_annotations(i);
    out.push_back(std::move(s));
  }
  return out;
}

struct GenerateDataResult {
  fs::path dir;
  SplitSizes sizes;
};

// Writes COCO files and PPM images. The unlabeled split's file carries no
// annotations; its withheld labels go to a separate diagnostics file.
inline GenerateDataResult cmd_generate_data(const ExperimentConfig& cfg, const std::string& out_dir) {
  validate(cfg);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  const auto split = generate_dataset(cfg.dataset);
  const int C = cfg.dataset.scene.num_classes;
  const auto images = (dir / DatasetFiles::kImages).string();
  const auto unlabeled = unlabeled_scenes_with_hidden_labels(split.unlabeled);
  write_coco_json(split.labeled, (dir / DatasetFiles::kLabeled).string(), images, C, true);
  write_coco_json(unlabeled, (dir / DatasetFiles::kUnlabeled).string(), images, C, false);
  fs::create_directories((dir / DatasetFiles::kHidden).parent_path());
  write_coco_json(unlabeled, (dir / DatasetFiles::kHidden).string(), "", C, true);
  write_coco_json(split.val, (dir / DatasetFiles::kVal).string(), images, C, true);
  write_coco_json(split.test, (dir / DatasetFiles::kTest).string(), images, C, true);

  const auto sz = split_sizes(cfg.dataset.n_scenes, cfg.dataset.labeled_fraction);
  auto m = manifest_json(cfg, "generate-data");
  m["seed"] = cfg.dataset.seed;
  m["labeled_fraction"] = cfg.dataset.labeled_fraction;
  m["split_sizes"] = {{"train", sz.train}, {"labeled", sz.labeled}, {"unlabeled", sz.unlabeled}, {"val", sz.val}, {"test", sz.test}};
  write_text(dir / DatasetFiles::kManifest, m.dump(2) + "\n");
  return {dir, sz};
}

inline DatasetSplit load_dataset(const std::string& dir_path) {
  const fs::path dir(dir_path);
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir_path);
  const auto images = (dir / DatasetFiles::kImages).string();
  DatasetSplit split;
  split.labeled = read_coco_json((dir / DatasetFiles::kLabeled).string(), images);
  auto unlabeled = read_coco_json((dir / DatasetFiles::kUnlabeled).string(), images);
  const auto hidden = dir / DatasetFiles::kHidden;
  if (fs::exists(hidden)) {
    std::map<int, std::vector<Annotation>> by_id;
    for (auto& s : read_coco_json(hidden.string(), "", false)) by_id[s.id] = std::move(s.annotations);
    for (auto& s : unlabeled) s.annotations = by_id[s.id];
  }
  split.unlabeled = UnlabeledSet(std::move(unlabeled));
  split.val = read_coco_json((dir / DatasetFiles::kVal).string(), images);
  split.test = read_coco_json((dir / DatasetFiles::kTest).string(), images);
  return split;
}

inline DatasetSplit obtain_dataset(const ExperimentConfig& cfg) {
  return cfg.dataset.dir.empty() ? generate_dataset(cfg.dataset) : load_dataset(cfg.dataset.dir);
}

// ---------------------------------------------------------------------------
// Training

enum class TrainMode { kSsl, kSupervisedOnly };

inline TrainMode parse_mode(const std::string& s) {
  if (s == "ssl") return TrainMode::kSsl;
  if (s == "supervised_only") return TrainMode::kSupervisedOnly;
  throw ConfigError("mode must be 'ssl' or 'supervised_only'; got '" + s + "'");
}

namespace experiment_detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace experiment_detail

class MetricsCsv {
 public:
  explicit MetricsCsv(int num_classes) : num_classes_(num_classes) {
    out_ << "iteration,phase,role,mAP50,mAP75,mAP50_95,mAPm,mAPl";
    for (int c = 0; c < num_classes; ++c) out_ << ",AP50_c" << c;
    out_ << ",loss_rpn_cls,loss_rpn_reg,loss_roi_cls,loss_roi_reg,loss_sup_total,"
            "loss_unsup_rpn_cls,loss_unsup_roi_cls,loss_unsup_total,pseudo_labels_per_image,learning_rate\n";
  }

  void row(int iteration, const std::string& phase, const std::string& role, const EvalResult& e, const IterationRecord* rec) {
    using experiment_detail::fmt;
    using experiment_detail::opt_fmt;
    out_ << iteration << ',' << phase << ',' << role << ',' << fmt(e.map50) << ',' << fmt(e.map75) << ',' << fmt(e.map50_95) << ','
         << opt_fmt(e.map_medium) << ',' << opt_fmt(e.map_large);
    for (int c = 0; c < num_classes_; ++c) out_ << ',' << fmt(e.ap50(c));
    if (rec) {
      const auto& s = rec->supervised;
      out_ << ',' << fmt(s.rpn_cls) << ',' << fmt(s.rpn_reg) << ',' << fmt(s.roi_cls) << ',' << fmt(s.roi_reg) << ',' << fmt(s.total);
      if (rec->unsupervised_skipped) out_ << ",,,";
      else out_ << ',' << fmt(rec->unsupervised.rpn_cls) << ',' << fmt(rec->unsupervised.roi_cls) << ',' << fmt(rec->unsupervised.total);
      out_ << ',' << fmt(rec->pseudo_labels_per_image) << ',' << fmt(rec->learning_rate);
    } else {
      out_ << ",,,,,,,,,,";
    }
    out_ << '\n';
    ++rows_;
  }

  std::string str() const { return out_.str(); }
  int rows() const { return rows_; }

 private:
  int num_classes_;
  std::ostringstream out_;
  int rows_ = 0;
};

struct TrainSummary {
  TrainMode mode = TrainMode::kSsl;
  EvalResult final_teacher;     // ssl; equals final_student in supervised mode
  EvalResult final_student;
  std::string metrics_csv;      // contents
  int csv_rows = 0;
  double mean_pseudo_labels_per_image = 0;  // over mutual iterations
  StudentStepAudit audit;
  ParameterSet teacher, student;
};

struct TrainOptions {
  bool write_files = true;
  bool audit_unsupervised_grads = false;
  std::ostream* log = nullptr;
};

// Runs one training job on an already materialised split. Metric rows are
// written at iteration 0, every eval_every iterations and at the end, with
// iterations counted across burn-in and mutual learning.
inline TrainSummary run_training(const ExperimentConfig& cfg, TrainMode mode, const DatasetSplit& data, const TrainOptions& opt = {}) {
  validate(cfg);
  const auto& d = cfg.detector;
  const auto& t = cfg.train;
  const fs::path out(cfg.output_dir);
  if (opt.write_files) {
    fs::create_directories(out / "checkpoints");
    write_text(out / "run_manifest.json", manifest_json(cfg, mode == TrainMode::kSsl ? "train --mode ssl" : "train --mode supervised_only").dump(2) + "\n");
  }
  TrainSummary sum;
  sum.mode = mode;
  MetricsCsv csv(d.num_classes);
  const int total = t.burn_in_iters + t.mutual_iters;
  auto due = [&](int it) { return it % t.eval_every == 0 || it == total; };
  auto save = [&](const ParameterSet& p, const std::string& name) {
    if (opt.write_files) checkpoint::save(p, (out / "checkpoints" / (name + ".tsdt")).string());
  };
  auto log = [&](const std::string& line) {
    if (opt.log) *opt.log << line << std::endl;
  };
  auto eval = [&](const ParameterSet& p) { return evaluate_params(p, data.val, d, t, cfg.eval); };

  const ParameterSet init = init_detector_params(d, t.seed);
  const int sup_iters = mode == TrainMode::kSsl ? t.burn_in_iters : total;
  const std::string sup_role = mode == TrainMode::kSsl ? "" : "supervised";
  ParameterSet theta = burn_in(
      init, data.labeled, d, t, sup_iters,
      [&](int it, const ParameterSet& p, const IterationRecord* rec) {
        if (!due(it)) {
          if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) save(p, "burn_in_" + std::to_string(it));
          return;
        }
        const auto e = eval(p);
        if (mode == TrainMode::kSsl) {
          csv.row(it, "burn_in", "teacher", e, rec);
          csv.row(it, "burn_in", "student", e, rec);
        } else {
          csv.row(it, "supervised", "supervised", e, rec);
        }
        log("iter " + std::to_string(it) + " burn-in val mAP50=" + experiment_detail::fmt(e.map50) + (rec ? " " + rec->supervised.str() : ""));
        if (cfg.checkpoint_every > 0 && it > 0 && it % cfg.checkpoint_every == 0) save(p, "burn_in_" + std::to_string(it));
      },
      [&](const ParameterSet& p, const std::string&) { save(p, "abort_burn_in"); });

  if (mode == TrainMode::kSupervisedOnly) {
    save(theta, "supervised_final");
    sum.final_student = evaluate_params(theta, data.test, d, t, cfg.eval);
    sum.final_teacher = sum.final_student;
    sum.teacher = theta.clone();
    sum.student = std::move(theta);
  } else {
    save(theta, "burn_in_final");
    MutualCallbacks cbs;
    double pl_sum = 0;
    cbs.on_iteration = [&](int it, const TeacherStudent& m, const IterationRecord* rec) {
      if (rec) pl_sum += rec->pseudo_labels_per_image;
      const int g = t.burn_in_iters + it;
      if (it == 0) return;  // already logged as the last burn-in row
      if (cfg.checkpoint_every > 0 && g % cfg.checkpoint_every == 0) {
        save(m.teacher, "teacher_" + std::to_string(g));
        save(m.student, "student_" + std::to_string(g));
      }
      if (!due(g)) return;
      const auto et = eval(m.teacher);
      const auto es = eval(m.student);
      csv.row(g, "mutual", "teacher", et, rec);
      csv.row(g, "mutual", "student", es, rec);
      log("iter " + std::to_string(g) + " val mAP50 teacher=" + experiment_detail::fmt(et.map50) + " student=" + experiment_detail::fmt(es.map50) +
          " pseudo/img=" + experiment_detail::fmt(rec->pseudo_labels_per_image));
    };
    cbs.on_abort = [&](const TeacherStudent& m) {
      save(m.teacher, "abort_teacher");
      save(m.student, "abort_student");
    };
    MutualOptions mopt;
    mopt.audit_unsupervised_grads = opt.audit_unsupervised_grads;
    auto res = mutual_learning(clone_to_teacher_student(theta), data.labeled, data.unlabeled, d, t, cbs, mopt);
    sum.mean_pseudo_labels_per_image = t.mutual_iters > 0 ? pl_sum / t.mutual_iters : 0.0;
    sum.audit = res.audit;
    save(res.models.teacher, "teacher_final");
    save(res.models.student, "student_final");
    sum.final_teacher = evaluate_params(res.models.teacher, data.test, d, t, cfg.eval);
    sum.final_student = evaluate_params(res.models.student, data.test, d, t, cfg.eval);
    sum.teacher = std::move(res.models.teacher);
    sum.student = std::move(res.models.student);
  }
  sum.metrics_csv = csv.str();
  sum.csv_rows = csv.rows();
  if (opt.write_files) {
    write_text(out / "metrics.csv", sum.metrics_csv);
    ordered_json fin;
    fin["mode"] = mode == TrainMode::kSsl ? "ssl" : "supervised_only";
    fin["split"] = "test";
    fin["teacher"] = to_json(sum.final_teacher);
    fin["student"] = to_json(sum.final_student);
    fin["mean_pseudo_labels_per_image"] = sum.mean_pseudo_labels_per_image;
    write_text(out / "final_eval.json", fin.dump(2) + "\n");
  }
  return sum;
}

inline TrainSummary cmd_train(const ExperimentConfig& cfg, TrainMode mode, const TrainOptions& opt = {}) {
  validate(cfg);
  return run_training(cfg, mode, obtain_dataset(cfg), opt);
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::string regime_summary(const EvalResult& r) {
  using experiment_detail::fmt;
  auto pct = [](std::optional<double> v) { return v ? fmt(100.0 * *v) : std::string("n/a"); };
  std::ostringstream s;
  s << "mAP50 " << pct(r.map50) << "  mAP75 " << pct(r.map75) << "  mAP50:95 " << pct(r.map50_95) << "  mAPm " << pct(r.map_medium)
    << "  mAPl " << pct(r.map_large);
  return s.str();
}

inline const std::vector<Scene>& split_by_name(const DatasetSplit& d, const std::string& name, std::vector<Scene>& scratch) {
  if (name == "test") return d.test;
  if (name == "val") return d.val;
  if (name == "train_labeled") return d.labeled;
  if (name == "train_unlabeled") {
    // Diagnostics only: evaluation against the withheld labels.
    scratch = unlabeled_scenes_with_hidden_labels(d.unlabeled);
    return scratch;
  }
  throw ConfigError("split must be one of test, val, train_labeled, train_unlabeled; got '" + name + "'");
}

// Loads a checkpoint, checks it against the configured architecture and
// evaluates it on the named split.
inline EvalResult evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& checkpoint_path, const DatasetSplit& data,
                                      const std::string& split) {
  if (!fs::exists(checkpoint_path)) throw IoError("checkpoint not found: " + checkpoint_path);
  const auto params = checkpoint::load(checkpoint_path);
  init_detector_params(cfg.detector, 0).require_congruent(params);
  std::vector<Scene> scratch;
  return evaluate_params(params, split_by_name(data, split, scratch), cfg.detector, cfg.train, cfg.eval);
}

inline EvalResult cmd_evaluate(const ExperimentConfig& cfg, const std::string& checkpoint_path, const std::string& split,
                               std::ostream* out = nullptr) {
  validate(cfg);
  if (!fs::exists(checkpoint_path)) throw IoError("checkpoint not found: " + checkpoint_path);
  const auto res = evaluate_checkpoint(cfg, checkpoint_path, obtain_dataset(cfg), split);
  ordered_json j;
  j["checkpoint"] = checkpoint_path;
  j["split"] = split;
  j["result"] = to_json(res, true);
  write_text(fs::path(cfg.output_dir) / ("eval_" + split + ".json"), j.dump(2) + "\n");
  if (out) *out << split << ": " << regime_summary(res) << '\n';
  return res;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRun {
  std::string setting;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double teacher_map50 = 0, student_map50 = 0, teacher_map50_95 = 0;
  double pseudo_labels_per_image = 0;
};

struct AblationPair {
  std::string a, b;
  std::optional<SignificanceReport> report;  // empty with fewer than 2 paired seeds
};

struct AblationResult {
  std::string axis;
  std::vector<std::string> settings;
  std::vector<AblationRun> runs;
  std::vector<AblationPair> pairs;
};

inline std::vector<std::string> ablation_settings(const ExperimentConfig& cfg, const std::string& axis) {
  auto nums = [](const std::vector<double>& v) {
    std::vector<std::string> out;
    for (double x : v) out.push_back(experiment_detail::fmt(x));
    return out;
  };
  if (axis == "tau") return nums(cfg.ablate.tau);
  if (axis == "alpha_ema") return nums(cfg.ablate.alpha_ema);
  if (axis == "s") return nums(cfg.ablate.s);
  if (axis == "init") return cfg.ablate.init;
  if (axis == "loss") return cfg.ablate.loss;
  throw ConfigError("ablation axis must be one of tau, alpha_ema, s, init, loss; got '" + axis + "'");
}

inline void apply_ablation_setting(ExperimentConfig& cfg, const std::string& axis, const std::string& setting) {
  if (axis == "tau") set_config_value(cfg, "train.tau", json::parse(setting));
  else if (axis == "alpha_ema") set_config_value(cfg, "train.alpha_ema", json::parse(setting));
  else if (axis == "s") set_config_value(cfg, "train.s", json::parse(setting));
  else if (axis == "loss") set_config_value(cfg, "train.roi_cls_kind", setting);
  else if (axis == "init") {
    // Without initialisation both models start from the random init.
    if (setting == "without") cfg.train.burn_in_iters = 0;
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
}

// Runs every setting across cfg.seeds in ssl mode; a failing run is recorded
// and the sweep continues. Paired t-tests compare final teacher mAP50 between
// every pair of settings over the seeds where both succeeded.
inline AblationResult run_ablation(const ExperimentConfig& cfg, const std::string& axis, const DatasetSplit& data, const TrainOptions& base = {}) {
  validate(cfg);
  AblationResult res;
  res.axis = axis;
  res.settings = ablation_settings(cfg, axis);
  const fs::path out(cfg.output_dir);
  for (const auto& setting : res.settings) {
    for (auto seed : cfg.seeds) {
      AblationRun run;
      run.setting = setting;
      run.seed = seed;
      try {
        ExperimentConfig c = cfg;
        apply_ablation_setting(c, axis, setting);
        c.train.seed = seed;
        c.output_dir = (out / ("ablate_" + axis) / (axis + "_" + setting) / ("seed_" + std::to_string(seed))).string();
        validate(c);
        const auto s = run_training(c, TrainMode::kSsl, data, base);
        run.ok = true;
        run.teacher_map50 = s.final_teacher.map50;
        run.student_map50 = s.final_student.map50;
        run.teacher_map50_95 = s.final_teacher.map50_95;
        run.pseudo_labels_per_image = s.mean_pseudo_labels_per_image;
      } catch (const std::exception& e) {
        run.error = e.what();
        if (base.log) *base.log << "ablation " << axis << "=" << setting << " seed " << seed << " failed: " << e.what() << std::endl;
      }
      res.runs.push_back(run);
    }
  }
  for (std::size_t i = 0; i < res.settings.size(); ++i)
    for (std::size_t j = i + 1; j < res.settings.size(); ++j) {
      AblationPair p{res.settings[i], res.settings[j], std::nullopt};
      std::vector<double> a, b;
      for (auto seed : cfg.seeds) {
        const AblationRun *ra = nullptr, *rb = nullptr;
        for (const auto& r : res.runs) {
          if (r.seed != seed || !r.ok) continue;
          if (r.setting == p.a) ra = &r;
          if (r.setting == p.b) rb = &r;
        }
        if (ra && rb) a.push_back(ra->teacher_map50), b.push_back(rb->teacher_map50);
      }
      if (a.size() >= 2) p.report = paired_t_test(a, b);
      res.pairs.push_back(p);
    }
  return res;
}

struct SettingStats {
  int n = 0;
  double mean = 0, stdev = 0;  // sample standard deviation; 0 when n < 2
};

inline SettingStats setting_stats(const AblationResult& r, const std::string& setting) {
  std::vector<double> v;
  for (const auto& run : r.runs)
    if (run.ok && run.setting == setting) v.push_back(run.teacher_map50);
  SettingStats s;
  s.n = static_cast<int>(v.size());
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= s.n;
  if (s.n > 1) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stdev = std::sqrt(ss / (s.n - 1));
  }
  return s;
}

inline std::string ablation_csv(const AblationResult& r) {
  using experiment_detail::fmt;
  std::ostringstream s;
  s << "axis,setting,seed,status,teacher_mAP50,student_mAP50,teacher_mAP50_95,pseudo_labels_per_image,error\n";
  for (const auto& run : r.runs) {
    std::string err = run.error;
    for (auto& ch : err)
      if (ch == ',' || ch == '\n') ch = ';';
    s << r.axis << ',' << run.setting << ',' << run.seed << ',' << (run.ok ? "ok" : "failed") << ',' << (run.ok ? fmt(run.teacher_map50) : "")
      << ',' << (run.ok ? fmt(run.student_map50) : "") << ',' << (run.ok ? fmt(run.teacher_map50_95) : "") << ','
      << (run.ok ? fmt(run.pseudo_labels_per_image) : "") << ',' << err << '\n';
  }
  s << "\naxis,setting,n_ok,mean_teacher_mAP50,stdev_teacher_mAP50\n";
  for (const auto& setting : r.settings) {
    const auto st = setting_stats(r, setting);
    s << r.axis << ',' << setting << ',' << st.n << ',' << fmt(st.mean) << ',' << fmt(st.stdev) << '\n';
  }
  return s.str();
}

inline ordered_json ablation_tests_json(const AblationResult& r) {
  ordered_json j;
  j["axis"] = r.axis;
  j["metric"] = "final teacher mAP50 on the test split, paired by seed";
  j["pairs"] = ordered_json::array();
  for (const auto& p : r.pairs) {
    ordered_json e;
    e["a"] = p.a;
    e["b"] = p.b;
    if (p.report) e["t_test"] = to_json(*p.report);
    else e["t_test"] = nullptr, e["note"] = "fewer than 2 seeds where both settings succeeded";
    j["pairs"].push_back(e);
  }
  return j;
}

inline AblationResult cmd_ablate(const ExperimentConfig& cfg, const std::string& axis, const TrainOptions& opt = {}) {
  validate(cfg);
  ablation_settings(cfg, axis);
  const auto res = run_ablation(cfg, axis, obtain_dataset(cfg), opt);
  const fs::path out(cfg.output_dir);
  write_text(out / ("ablation_" + axis + ".csv"), ablation_csv(res));
  write_text(out / ("ablation_" + axis + "_ttests.json"), ablation_tests_json(res).dump(2) + "\n");
  return res;
}

}  // namespace tsdet
