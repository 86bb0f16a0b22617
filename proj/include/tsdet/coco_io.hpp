// SPDX-License-Identifier: Apache-2.0
//
// COCO detection JSON and binary PPM images, so that real data can replace the
// synthetic scenes. Category ids map to class indices by their order in the
// "categories" array sorted by id.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdet/error.hpp"
#include "tsdet/synth_data.hpp"

namespace tsdet {

inline void write_ppm(const Tensor& image, const std::string& path) {
  if (image.rank() != 3 || image.shape[2] != 3) throw ShapeError("write_ppm: expected [H,W,3], got " + shape_str(image.shape));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image for writing: " + path);
  f << "P6\n" << image.shape[1] << ' ' << image.shape[0] << "\n255\n";
  std::string bytes(image.numel(), '\0');
  for (std::size_t i = 0; i < image.numel(); ++i)
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(image.data[i], 0.0f, 1.0f) * 255.0f)));
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing image: " + path);
}

inline Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image: " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw IoError(path + ": unsupported PPM header (need binary P6, maxval 255)");
  f.get();
  std::string bytes(static_cast<std::size_t>(w) * h * 3, '\0');
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError(path + ": truncated pixel data");
  Tensor img(Shape{h, w, 3});
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<unsigned char>(bytes[i]) / 255.0f;
  return img;
}

inline std::string scene_file_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06d.ppm", id);
  return buf;
}

inline nlohmann::ordered_json coco_document(const std::vector<Scene>& scenes, int num_classes, bool with_annotations = true) {
  using nlohmann::ordered_json;
  ordered_json doc;
  doc["images"] = ordered_json::array();
  doc["annotations"] = ordered_json::array();
  doc["categories"] = ordered_json::array();
  int ann_id = 1;
  for (const auto& s : scenes) {
    doc["images"].push_back({{"id", s.id}, {"file_name", scene_file_name(s.id)}, {"width", s.width()}, {"height", s.height()}});
    if (!with_annotations) continue;
    for (const auto& a : s.annotations) {
      const double w = double(a.box.x2) - double(a.box.x1);
      const double h = double(a.box.y2) - double(a.box.y1);
      doc["annotations"].push_back({{"id", ann_id++},
                                    {"image_id", s.id},
                                    {"category_id", a.class_id + 1},
                                    {"bbox", {double(a.box.x1), double(a.box.y1), w, h}},
                                    {"area", w * h},
                                    {"iscrowd", 0}});
    }
  }
  for (int c = 0; c < num_classes; ++c) doc["categories"].push_back({{"id", c + 1}, {"name", class_name(c)}});
  return doc;
}

// Writes the JSON document; when image_dir is non-empty also writes one PPM
// per scene there.
inline void write_coco_json(const std::vector<Scene>& scenes, const std::string& path, const std::string& image_dir = "",
                            int num_classes = kDefaultNumClasses, bool with_annotations = true) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << coco_document(scenes, num_classes, with_annotations).dump(1) << '\n';
  if (!f) throw IoError("failed writing: " + path);
  if (!image_dir.empty()) {
    std::filesystem::create_directories(image_dir);
    for (const auto& s : scenes) write_ppm(s.image, (std::filesystem::path(image_dir) / scene_file_name(s.id)).string());
  }
}

namespace coco_detail {

inline const nlohmann::json& require(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw IoError(where + ": missing key '" + key + "'");
  return obj.at(key);
}

}  // namespace coco_detail

// Reads a COCO detection file. Images are loaded from image_dir/file_name
// unless load_images is false, in which case a blank [height,width,3] image
// stands in.
inline std::vector<Scene> read_coco_json(const std::string& path, const std::string& image_dir, bool load_images = true) {
  using coco_detail::require;
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path + ": malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  try {
    std::vector<int> cat_ids;
    for (const auto& c : require(doc, "categories", path)) cat_ids.push_back(require(c, "id", path + " category").get<int>());
    std::sort(cat_ids.begin(), cat_ids.end());
    std::map<int, int> cat_to_class;
    for (std::size_t i = 0; i < cat_ids.size(); ++i) cat_to_class[cat_ids[i]] = static_cast<int>(i);

    std::vector<Scene> scenes;
    std::map<int, std::size_t> by_id;
    for (const auto& im : require(doc, "images", path)) {
      const int id = require(im, "id", path + " image").get<int>();
      const std::string where = path + " image " + std::to_string(id);
      const auto file = require(im, "file_name", where).get<std::string>();
      const int w = require(im, "width", where).get<int>();
      const int h = require(im, "height", where).get<int>();
      if (by_id.count(id)) throw IoError(where + ": duplicate image id");
      Scene s;
      s.id = id;
      if (load_images) {
        s.image = read_ppm((std::filesystem::path(image_dir) / file).string());
        if (s.height() != h || s.width() != w) throw IoError(where + ": image file size disagrees with width/height");
      } else {
        s.image = Tensor(Shape{h, w, 3});
      }
      by_id[id] = scenes.size();
      scenes.push_back(std::move(s));
    }
    for (const auto& a : require(doc, "annotations", path)) {
      const std::string where = path + " annotation " + (a.contains("id") ? a.at("id").dump() : std::string("?"));
      const int image_id = require(a, "image_id", where).get<int>();
      const int cat = require(a, "category_id", where).get<int>();
      const auto& bbox = require(a, "bbox", where);
      auto it = by_id.find(image_id);
      if (it == by_id.end()) throw IoError(where + ": references missing image id " + std::to_string(image_id));
      auto ct = cat_to_class.find(cat);
      if (ct == cat_to_class.end()) throw IoError(where + ": unknown category id " + std::to_string(cat));
      if (!bbox.is_array() || bbox.size() != 4) throw IoError(where + ": bbox must be [x,y,w,h]");
      const double x = bbox[0].get<double>(), y = bbox[1].get<double>();
      const double w = bbox[2].get<double>(), h = bbox[3].get<double>();
      Scene& s = scenes[it->second];
      if (!(w > 0 && h > 0) || x < 0 || y < 0 || x + w > s.width() || y + h > s.height())
        throw IoError(where + ": bbox out of image bounds or degenerate");
      s.annotations.push_back({Box{float(x), float(y), float(x + w), float(y + h)}, ct->second});
    }
    return scenes;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

}  // namespace tsdet
