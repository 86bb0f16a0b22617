// SPDX-License-Identifier: Apache-2.0
//
// Synthetic detection scenes with a long-tailed class profile. Each class is a
// distinct shape/texture; instance colors are random so that shape, not
// color, identifies the class.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "tsdet/error.hpp"
#include "tsdet/geometry.hpp"
#include "tsdet/random.hpp"
#include "tsdet/tensor.hpp"

namespace tsdet {

inline constexpr int kDefaultNumClasses = 7;

struct SceneConfig {
  int height = 96;
  int width = 96;
  int num_classes = kDefaultNumClasses;
  std::vector<double> class_weights{0.30, 0.17, 0.25, 0.04, 0.06, 0.08, 0.10};
  int max_instances = 4;
  double min_size = 14.0;
  double max_size = 56.0;
  double max_rotation_deg = 15.0;
  double border_occlusion_prob = 0.15;
  double noise_std = 0.03;
  double max_pairwise_iou = 0.3;
};

// image: [H, W, 3], values in [0, 1].
struct Scene {
  int id = 0;
  Tensor image;
  std::vector<Annotation> annotations;

  int height() const { return image.shape.at(0); }
  int width() const { return image.shape.at(1); }
};

inline const char* class_name(int c) {
  static const char* names[] = {"disk", "square", "ring", "cross", "triangle", "striped", "frame"};
  return (c >= 0 && c < 7) ? names[c] : "class";
}

namespace synth_detail {

// Membership of local coordinates (u, v) in [-1, 1]^2 for each class.
inline bool inside(int cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (cls % 7) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return au <= 0.92 && av <= 0.92;
    case 2: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.30;
    }
    case 3: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 4: return v >= -1.0 && v <= 1.0 && au <= 0.5 * (v + 1.0);
    case 5: return au <= 0.92 && av <= 0.92 && static_cast<int>(std::floor((v + 1.0) * 2.5)) % 2 == 0;
    case 6: {
      const double m = std::max(au, av);
      return m <= 0.95 && m >= 0.6;
    }
  }
  return false;
}

struct RenderedMask {
  std::vector<std::pair<int, int>> pixels;  // (y, x)
  Box box;
};

inline RenderedMask rasterize(int cls, double cx, double cy, double half_w, double half_h, double angle, int H, int W) {
  RenderedMask m;
  const double c = std::cos(angle), s = std::sin(angle);
  const double reach = std::hypot(half_w, half_h) + 1.0;
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + reach)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + reach)));
  int minx = W, miny = H, maxx = -1, maxy = -1;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (c * dx + s * dy) / half_w;
      const double v = (-s * dx + c * dy) / half_h;
      if (!inside(cls, u, v)) continue;
      m.pixels.emplace_back(y, x);
      minx = std::min(minx, x);
      maxx = std::max(maxx, x);
      miny = std::min(miny, y);
      maxy = std::max(maxy, y);
    }
  if (!m.pixels.empty()) m.box = Box{float(minx), float(miny), float(maxx + 1), float(maxy + 1)};
  return m;
}

}  // namespace synth_detail

inline void validate(const SceneConfig& cfg) {
  if (cfg.height < 16 || cfg.width < 16) throw ConfigError("dataset.scene.height/width must be at least 16");
  if (cfg.num_classes < 1 || cfg.num_classes > 7) throw ConfigError("dataset.scene.num_classes must be in [1, 7]");
  if (static_cast<int>(cfg.class_weights.size()) != cfg.num_classes)
    throw ConfigError("dataset.scene.class_weights has " + std::to_string(cfg.class_weights.size()) + " entries for " +
                      std::to_string(cfg.num_classes) + " classes");
  double total = 0;
  for (double w : cfg.class_weights) {
    if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("dataset.scene.class_weights must be finite and non-negative");
    total += w;
  }
  if (!(total > 0)) throw ConfigError("dataset.scene.class_weights must sum to a positive value");
  if (cfg.max_instances < 1) throw ConfigError("dataset.scene.max_instances must be >= 1");
  if (!(cfg.min_size >= 4 && cfg.max_size >= cfg.min_size)) throw ConfigError("dataset.scene.min_size/max_size need 4 <= min_size <= max_size");
  if (!(cfg.max_rotation_deg >= 0 && cfg.max_rotation_deg <= 90)) throw ConfigError("dataset.scene.max_rotation_deg must be in [0, 90]");
  if (!(cfg.border_occlusion_prob >= 0 && cfg.border_occlusion_prob <= 1))
    throw ConfigError("dataset.scene.border_occlusion_prob must be in [0, 1]");
  if (!(cfg.noise_std >= 0)) throw ConfigError("dataset.scene.noise_std must be >= 0");
  if (!(cfg.max_pairwise_iou >= 0 && cfg.max_pairwise_iou <= 1)) throw ConfigError("dataset.scene.max_pairwise_iou must be in [0, 1]");
}

// Deterministic in (rng_seed, cfg).
inline Scene generate_scene(std::uint64_t rng_seed, const SceneConfig& cfg = {}) {
  validate(cfg);
  Rng rng(mix_seed(rng_seed, 0x5CE7E));
  const int H = cfg.height, W = cfg.width;
  Scene scene;
  scene.image = Tensor(Shape{H, W, 3});
  auto& px = scene.image.data;

  // Background: base color plus a linear gradient.
  double base[3], grad_x[3], grad_y[3];
  for (int k = 0; k < 3; ++k) {
    base[k] = rng.uniform(0.15, 0.55);
    grad_x[k] = rng.uniform(-0.15, 0.15);
    grad_y[k] = rng.uniform(-0.15, 0.15);
  }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int k = 0; k < 3; ++k)
        px[(static_cast<std::size_t>(y) * W + x) * 3 + k] =
            static_cast<float>(base[k] + grad_x[k] * (x / double(W) - 0.5) + grad_y[k] * (y / double(H) - 0.5));

  const int count = rng.integer(1, cfg.max_instances);
  for (int n = 0; n < count; ++n) {
    const int cls = rng.categorical(cfg.class_weights);
    synth_detail::RenderedMask mask;
    for (int attempt = 0;; ++attempt) {
      const double size = rng.uniform(cfg.min_size, cfg.max_size);
      const double aspect = std::exp(rng.uniform(-0.2, 0.2));
      const double half_w = 0.5 * size * aspect, half_h = 0.5 * size / aspect;
      const double angle = rng.uniform(-1.0, 1.0) * cfg.max_rotation_deg * std::numbers::pi / 180.0;
      double cx, cy;
      if (rng.bernoulli(cfg.border_occlusion_prob)) {
        // Let up to ~40% of the extent fall outside one border.
        const double cut = rng.uniform(0.1, 0.4);
        switch (rng.integer(0, 3)) {
          case 0: cx = half_w * (1 - 2 * cut), cy = rng.uniform(half_h, H - half_h); break;
          case 1: cx = W - half_w * (1 - 2 * cut), cy = rng.uniform(half_h, H - half_h); break;
          case 2: cy = half_h * (1 - 2 * cut), cx = rng.uniform(half_w, W - half_w); break;
          default: cy = H - half_h * (1 - 2 * cut), cx = rng.uniform(half_w, W - half_w); break;
        }
      } else {
        cx = rng.uniform(std::min(half_w, W / 2.0), std::max(W - half_w, W / 2.0));
        cy = rng.uniform(std::min(half_h, H / 2.0), std::max(H - half_h, H / 2.0));
      }
      mask = synth_detail::rasterize(cls, cx, cy, half_w, half_h, angle, H, W);
      if (mask.pixels.size() < 24 || mask.box.width() < 6 || mask.box.height() < 6) continue;
      bool crowded = false;
      for (const auto& a : scene.annotations) crowded = crowded || iou(a.box, mask.box) > cfg.max_pairwise_iou;
      if (!crowded || attempt >= 30) break;
    }
    // Object color contrasts with the local background.
    double color[3];
    const double bright = (base[0] + base[1] + base[2]) / 3.0;
    const double target = bright < 0.35 ? rng.uniform(0.6, 0.95) : rng.uniform(0.0, 0.2);
    for (int k = 0; k < 3; ++k) color[k] = std::clamp(target + rng.uniform(-0.25, 0.25), 0.0, 1.0);
    for (auto [y, x] : mask.pixels)
      for (int k = 0; k < 3; ++k) px[(static_cast<std::size_t>(y) * W + x) * 3 + k] = static_cast<float>(color[k]);
    scene.annotations.push_back({mask.box, cls});
  }

  // Quantized to 8 bits so that a PPM round trip is lossless.
  for (auto& v : px) {
    const float noisy = std::clamp(static_cast<float>(v + cfg.noise_std * rng.normal()), 0.0f, 1.0f);
    v = static_cast<float>(std::lround(noisy * 255.0f)) / 255.0f;
  }
  return scene;
}

// Training scenes whose labels are withheld. Only images are reachable from
// the public surface used by training; the hidden annotations exist for
// diagnostics and audits.
class UnlabeledSet {
 public:
  UnlabeledSet() = default;
  explicit UnlabeledSet(std::vector<Scene> scenes) {
    for (auto& s : scenes) {
      hidden_.push_back(std::move(s.annotations));
      s.annotations.clear();
      scenes_.push_back(std::move(s));
    }
  }

  std::size_t size() const { return scenes_.size(); }
  bool empty() const { return scenes_.empty(); }
  int id(std::size_t i) const { return scenes_.at(i).id; }
  const Tensor& image(std::size_t i) const { return scenes_.at(i).image; }
  // Scene view with an empty annotation list.
  const Scene& image_scene(std::size_t i) const { return scenes_.at(i); }

  const std::vector<Annotation>& diagnostic_annotations(std::size_t i) const { return hidden_.at(i); }
  void overwrite_diagnostic_annotations(std::size_t i, std::vector<Annotation> a) { hidden_.at(i) = std::move(a); }

 private:
  std::vector<Scene> scenes_;
  std::vector<std::vector<Annotation>> hidden_;
};

struct DatasetSplit {
  std::vector<Scene> labeled;
  UnlabeledSet unlabeled;
  std::vector<Scene> val;
  std::vector<Scene> test;
  std::uint64_t seed = 0;
  double labeled_fraction = 0;
};

struct SplitSizes {
  int train = 0, labeled = 0, unlabeled = 0, val = 0, test = 0;
};

inline SplitSizes split_sizes(int n_scenes, double labeled_fraction) {
  if (n_scenes < 100) throw ConfigError("dataset.n_scenes must be >= 100");
  if (!(labeled_fraction > 0 && labeled_fraction <= 1)) throw ConfigError("dataset.labeled_fraction must be in (0, 1]");
  SplitSizes s;
  s.train = static_cast<int>(std::llround(0.8 * n_scenes));
  s.val = static_cast<int>(std::llround(0.1 * n_scenes));
  s.test = n_scenes - s.train - s.val;
  s.labeled = static_cast<int>(std::llround(labeled_fraction * s.train));
  if (s.labeled == 0)
    throw ConfigError("dataset.labeled_fraction " + std::to_string(labeled_fraction) + " leaves no labeled scenes out of " +
                      std::to_string(s.train) + " training scenes; increase n_scenes");
  s.unlabeled = s.train - s.labeled;
  return s;
}

// 80/10/10 train/val/test; within train, the first labeled_fraction keep labels.
inline DatasetSplit make_splits(int n_scenes, double labeled_fraction, std::uint64_t seed, const SceneConfig& cfg = {}) {
  const SplitSizes sz = split_sizes(n_scenes, labeled_fraction);
  validate(cfg);
  std::vector<int> ids(static_cast<std::size_t>(n_scenes));
  for (int i = 0; i < n_scenes; ++i) ids[static_cast<std::size_t>(i)] = i;
  Rng rng(mix_seed(seed, 0x5A17));
  rng.shuffle(ids);
  auto make = [&](int id) {
    Scene s = generate_scene(mix_seed(seed, static_cast<std::uint64_t>(id)), cfg);
    s.id = id;
    return s;
  };
  DatasetSplit split;
  split.seed = seed;
  split.labeled_fraction = labeled_fraction;
  std::vector<Scene> unlabeled;
  for (int i = 0; i < n_scenes; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (i < sz.labeled) split.labeled.push_back(make(id));
    else if (i < sz.train) unlabeled.push_back(make(id));
    else if (i < sz.train + sz.val) split.val.push_back(make(id));
    else split.test.push_back(make(id));
  }
  split.unlabeled = UnlabeledSet(std::move(unlabeled));
  return split;
}

}  // namespace tsdet
