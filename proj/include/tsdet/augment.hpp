// SPDX-License-Identifier: Apache-2.0
//
// Weak (flip only) and strong (flip + photometric) pipelines. Every sampled
// transform is logged in a recipe that re-applies bit-identically.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdet/random.hpp"
#include "tsdet/synth_data.hpp"

namespace tsdet {

struct AugmentConfig {
  double flip_prob = 0.5;
  double grayscale_prob = 0.2;
  double jitter_prob = 0.8;
  double jitter_min = 0.6;
  double jitter_max = 1.4;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  double cutout_prob = 0.7;
  int cutout_min_count = 1;
  int cutout_max_count = 3;
  double cutout_min_area = 0.02;
  double cutout_max_area = 0.10;
  std::vector<double> fill_color{0.5, 0.5, 0.5};

  // All probabilities zeroed.
  static AugmentConfig none() {
    AugmentConfig c;
    c.flip_prob = c.grayscale_prob = c.jitter_prob = c.blur_prob = c.cutout_prob = 0;
    return c;
  }
};

enum class AugKind { kFlip, kGrayscale, kJitter, kBlur, kCutout };

inline const char* aug_kind_name(AugKind k) {
  switch (k) {
    case AugKind::kFlip: return "flip";
    case AugKind::kGrayscale: return "grayscale";
    case AugKind::kJitter: return "color_jitter";
    case AugKind::kBlur: return "gaussian_blur";
    case AugKind::kCutout: return "cutout";
  }
  return "?";
}

// params: flip {}, grayscale {}, jitter {brightness, contrast, saturation},
// blur {sigma}, cutout {x0, y0, x1, y1, r, g, b} in pixels.
struct AugStep {
  AugKind kind;
  std::vector<double> params;
};

using Recipe = std::vector<AugStep>;

struct AugmentedScene {
  Tensor image;
  std::vector<Annotation> annotations;
  Recipe recipe;
};

inline nlohmann::json recipe_to_json(const Recipe& r) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : r) out.push_back({{"op", aug_kind_name(s.kind)}, {"params", s.params}});
  return out;
}

namespace aug_detail {

inline std::size_t at(int W, int y, int x, int k) { return (static_cast<std::size_t>(y) * W + x) * 3 + k; }

inline float gray(const float* p) { return 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2]; }

inline void clamp01(Tensor& img) {
  for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

inline void flip(Tensor& img, std::vector<Annotation>& anns) {
  const int H = img.shape[0], W = img.shape[1];
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W / 2; ++x)
      for (int k = 0; k < 3; ++k) std::swap(img.data[at(W, y, x, k)], img.data[at(W, y, W - 1 - x, k)]);
  for (auto& a : anns) {
    const float x1 = static_cast<float>(W) - a.box.x2;
    const float x2 = static_cast<float>(W) - a.box.x1;
    a.box.x1 = x1;
    a.box.x2 = x2;
  }
}

inline void grayscale(Tensor& img) {
  for (std::size_t i = 0; i < img.numel(); i += 3) {
    const float g = gray(&img.data[i]);
    img.data[i] = img.data[i + 1] = img.data[i + 2] = g;
  }
  clamp01(img);
}

inline void jitter(Tensor& img, double brightness, double contrast, double saturation) {
  for (auto& v : img.data) v = static_cast<float>(v * brightness);
  clamp01(img);
  double m = 0;
  for (std::size_t i = 0; i < img.numel(); i += 3) m += gray(&img.data[i]);
  m /= static_cast<double>(img.numel() / 3);
  for (auto& v : img.data) v = static_cast<float>((v - m) * contrast + m);
  clamp01(img);
  for (std::size_t i = 0; i < img.numel(); i += 3) {
    const float g = gray(&img.data[i]);
    for (int k = 0; k < 3; ++k) img.data[i + k] = static_cast<float>(g + (img.data[i + k] - g) * saturation);
  }
  clamp01(img);
}

inline void blur(Tensor& img, double sigma) {
  const int H = img.shape[0], W = img.shape[1];
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kern(static_cast<std::size_t>(2 * r + 1));
  double z = 0;
  for (int i = -r; i <= r; ++i) z += (kern[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& k : kern) k /= z;
  Tensor tmp(img.shape);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int k = 0; k < 3; ++k) {
        double s = 0;
        for (int i = -r; i <= r; ++i) s += kern[static_cast<std::size_t>(i + r)] * img.data[at(W, y, std::clamp(x + i, 0, W - 1), k)];
        tmp.data[at(W, y, x, k)] = static_cast<float>(s);
      }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int k = 0; k < 3; ++k) {
        double s = 0;
        for (int i = -r; i <= r; ++i) s += kern[static_cast<std::size_t>(i + r)] * tmp.data[at(W, std::clamp(y + i, 0, H - 1), x, k)];
        img.data[at(W, y, x, k)] = static_cast<float>(s);
      }
  clamp01(img);
}

inline void cutout(Tensor& img, const std::vector<double>& p) {
  const int W = img.shape[1];
  for (int y = static_cast<int>(p[1]); y < static_cast<int>(p[3]); ++y)
    for (int x = static_cast<int>(p[0]); x < static_cast<int>(p[2]); ++x)
      for (int k = 0; k < 3; ++k) img.data[at(W, y, x, k)] = static_cast<float>(p[4 + static_cast<std::size_t>(k)]);
  clamp01(img);
}

}  // namespace aug_detail

inline void apply_step(Tensor& image, std::vector<Annotation>& anns, const AugStep& step) {
  switch (step.kind) {
    case AugKind::kFlip: aug_detail::flip(image, anns); break;
    case AugKind::kGrayscale: aug_detail::grayscale(image); break;
    case AugKind::kJitter: aug_detail::jitter(image, step.params.at(0), step.params.at(1), step.params.at(2)); break;
    case AugKind::kBlur: aug_detail::blur(image, step.params.at(0)); break;
    case AugKind::kCutout: aug_detail::cutout(image, step.params); break;
  }
}

inline AugmentedScene apply_recipe(const Tensor& image, const std::vector<Annotation>& anns, const Recipe& recipe) {
  AugmentedScene out{image, anns, recipe};
  for (const auto& s : recipe) apply_step(out.image, out.annotations, s);
  return out;
}

// Horizontal flip with probability flip_prob.
inline AugmentedScene weak_augment(const Scene& scene, Rng& rng, const AugmentConfig& cfg = {}) {
  Recipe r;
  if (rng.bernoulli(cfg.flip_prob)) r.push_back({AugKind::kFlip, {}});
  return apply_recipe(scene.image, scene.annotations, r);
}

// Samples the photometric stage and applies it on top of `scene`. Used both
// by strong_augment and to derive the student view from the teacher's weak
// view of an unlabeled image.
inline void photometric_augment(AugmentedScene& scene, Rng& rng, const AugmentConfig& cfg = {}) {
  const int H = scene.image.shape[0], W = scene.image.shape[1];
  auto push = [&](AugStep s) {
    apply_step(scene.image, scene.annotations, s);
    scene.recipe.push_back(std::move(s));
  };
  if (rng.bernoulli(cfg.grayscale_prob)) push({AugKind::kGrayscale, {}});
  if (rng.bernoulli(cfg.jitter_prob)) {
    const double b = rng.uniform(cfg.jitter_min, cfg.jitter_max);
    const double c = rng.uniform(cfg.jitter_min, cfg.jitter_max);
    const double s = rng.uniform(cfg.jitter_min, cfg.jitter_max);
    push({AugKind::kJitter, {b, c, s}});
  }
  if (rng.bernoulli(cfg.blur_prob)) push({AugKind::kBlur, {rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)}});
  if (rng.bernoulli(cfg.cutout_prob)) {
    const int n = rng.integer(cfg.cutout_min_count, cfg.cutout_max_count);
    for (int i = 0; i < n; ++i) {
      const double area = rng.uniform(cfg.cutout_min_area, cfg.cutout_max_area) * H * W;
      const double ratio = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
      const int w = std::clamp(static_cast<int>(std::lround(std::sqrt(area * ratio))), 1, W);
      const int h = std::clamp(static_cast<int>(std::lround(area / w)), 1, H);
      const int x0 = rng.integer(0, W - w);
      const int y0 = rng.integer(0, H - h);
      push({AugKind::kCutout,
            {double(x0), double(y0), double(x0 + w), double(y0 + h), cfg.fill_color.at(0), cfg.fill_color.at(1), cfg.fill_color.at(2)}});
    }
  }
}

inline AugmentedScene strong_augment(const Scene& scene, Rng& rng, const AugmentConfig& cfg = {}) {
  AugmentedScene out = weak_augment(scene, rng, cfg);
  photometric_augment(out, rng, cfg);
  return out;
}

// Per-channel mean over a set of scenes, used as the cutout fill.
inline std::vector<double> mean_color(const std::vector<Scene>& scenes) {
  std::vector<double> m(3, 0.0);
  std::size_t n = 0;
  for (const auto& s : scenes) {
    for (std::size_t i = 0; i < s.image.numel(); i += 3)
      for (int k = 0; k < 3; ++k) m[static_cast<std::size_t>(k)] += s.image.data[i + static_cast<std::size_t>(k)];
    n += s.image.numel() / 3;
  }
  if (n == 0) return {0.5, 0.5, 0.5};
  for (auto& v : m) v /= static_cast<double>(n);
  return m;
}

}  // namespace tsdet
