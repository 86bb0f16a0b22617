// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "tsdet/tsdet.hpp"

using namespace tsdet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("tsdet_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Scene, DeterministicInSeed) {
  const Scene a = generate_scene(0), b = generate_scene(0);
  EXPECT_EQ(a.image.data, b.image.data);
  EXPECT_EQ(a.annotations, b.annotations);
  const Scene c = generate_scene(1);
  EXPECT_NE(a.image.data, c.image.data);
}

TEST(Scene, InvariantsHoldOverManySeeds) {
  const SceneConfig cfg;
  for (std::uint64_t s = 0; s < 300; ++s) {
    const Scene sc = generate_scene(s, cfg);
    ASSERT_EQ(sc.height(), cfg.height);
    ASSERT_EQ(sc.width(), cfg.width);
    EXPECT_GE(sc.annotations.size(), 1u);
    EXPECT_LE(static_cast<int>(sc.annotations.size()), cfg.max_instances);
    for (const auto& a : sc.annotations) {
      EXPECT_TRUE(a.box.valid());
      EXPECT_GT(a.box.width(), 0);
      EXPECT_GT(a.box.height(), 0);
      EXPECT_GE(a.box.x1, 0);
      EXPECT_GE(a.box.y1, 0);
      EXPECT_LE(a.box.x2, cfg.width);
      EXPECT_LE(a.box.y2, cfg.height);
      EXPECT_GE(a.class_id, 0);
      EXPECT_LT(a.class_id, cfg.num_classes);
    }
    for (float v : sc.image.data) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Scene, PixelsAreEightBitQuantized) {
  const Scene sc = generate_scene(3);
  for (float v : sc.image.data) EXPECT_FLOAT_EQ(v, std::lround(v * 255.0f) / 255.0f);
}

TEST(Scene, DegenerateClassWeights) {
  SceneConfig cfg;
  cfg.class_weights = {1, 0, 0, 0, 0, 0, 0};
  for (std::uint64_t s = 0; s < 50; ++s)
    for (const auto& a : generate_scene(s, cfg).annotations) EXPECT_EQ(a.class_id, 0);
}

TEST(Scene, ClassFrequenciesFollowWeights) {
  const SceneConfig cfg;
  std::vector<int> counts(7, 0);
  int total = 0;
  for (std::uint64_t s = 0; total < 10000; ++s)
    for (const auto& a : generate_scene(s, cfg).annotations) ++counts[static_cast<std::size_t>(a.class_id)], ++total;
  double wsum = 0;
  for (double w : cfg.class_weights) wsum += w;
  for (int c = 0; c < 7; ++c) EXPECT_NEAR(double(counts[static_cast<std::size_t>(c)]) / total, cfg.class_weights[static_cast<std::size_t>(c)] / wsum, 0.02) << c;
}

TEST(Scene, ValidationNamesTheKey) {
  SceneConfig cfg;
  cfg.max_instances = 0;
  try {
    validate(cfg);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("max_instances"), std::string::npos);
  }
  cfg = {};
  cfg.class_weights = {1, 1};
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = {};
  cfg.num_classes = 8;
  EXPECT_THROW(validate(cfg), ConfigError);
}

TEST(Splits, SizesFollowTheFractions) {
  const auto s = split_sizes(1000, 0.10);
  EXPECT_EQ(s.train, 800);
  EXPECT_EQ(s.labeled, 80);
  EXPECT_EQ(s.unlabeled, 720);
  EXPECT_EQ(s.val, 100);
  EXPECT_EQ(s.test, 100);
  EXPECT_EQ(split_sizes(1000, 0.01).labeled, 8);
  EXPECT_EQ(split_sizes(1000, 0.05).labeled, 40);
  EXPECT_THROW(split_sizes(1000, 0.0), ConfigError);
  EXPECT_THROW(split_sizes(1000, 1.5), ConfigError);
  EXPECT_THROW(split_sizes(100, 0.001), ConfigError);
}

TEST(Splits, DisjointDeterministicAndLabelsWithheld) {
  const auto a = make_splits(200, 0.1, 9);
  const auto b = make_splits(200, 0.1, 9);
  std::set<int> ids;
  std::size_t n = 0;
  auto add = [&](int id) {
    ids.insert(id);
    ++n;
  };
  for (const auto& s : a.labeled) add(s.id);
  for (std::size_t i = 0; i < a.unlabeled.size(); ++i) add(a.unlabeled.id(i));
  for (const auto& s : a.val) add(s.id);
  for (const auto& s : a.test) add(s.id);
  EXPECT_EQ(ids.size(), 200u);
  EXPECT_EQ(n, 200u);
  ASSERT_EQ(a.labeled.size(), b.labeled.size());
  for (std::size_t i = 0; i < a.labeled.size(); ++i) EXPECT_EQ(a.labeled[i].id, b.labeled[i].id);
  for (std::size_t i = 0; i < a.unlabeled.size(); ++i) {
    EXPECT_TRUE(a.unlabeled.image_scene(i).annotations.empty());
    EXPECT_FALSE(a.unlabeled.diagnostic_annotations(i).empty());
  }
}

TEST(Splits, FullFractionLeavesNoUnlabeled) {
  const auto a = make_splits(100, 1.0, 1);
  EXPECT_TRUE(a.unlabeled.empty());
  EXPECT_EQ(a.labeled.size(), 80u);
}

TEST(Coco, RoundTripPreservesAnnotationsAndPixels) {
  const auto dir = temp_dir("coco_rt");
  std::vector<Scene> scenes;
  for (int i = 0; i < 10; ++i) {
    Scene s = generate_scene(static_cast<std::uint64_t>(i));
    s.id = 100 + i;
    scenes.push_back(s);
  }
  write_coco_json(scenes, (dir / "a.json").string(), (dir / "img").string());
  const auto back = read_coco_json((dir / "a.json").string(), (dir / "img").string());
  ASSERT_EQ(back.size(), scenes.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, scenes[i].id);
    EXPECT_EQ(back[i].annotations, scenes[i].annotations);
    EXPECT_EQ(back[i].image.data, scenes[i].image.data);
  }
}

TEST(Coco, BboxUsesXYWidthHeight) {
  const auto dir = temp_dir("coco_bbox");
  std::ofstream(dir / "a.json") << R"({"images":[{"id":1,"file_name":"x.ppm","width":96,"height":96}],
    "annotations":[{"id":1,"image_id":1,"category_id":1,"bbox":[10,20,30,40]}],"categories":[{"id":1,"name":"disk"}]})";
  const auto s = read_coco_json((dir / "a.json").string(), "", false);
  ASSERT_EQ(s.size(), 1u);
  ASSERT_EQ(s[0].annotations.size(), 1u);
  EXPECT_EQ(s[0].annotations[0].box, (Box{10, 20, 40, 60}));
}

TEST(Coco, MissingImageIdIsNamed) {
  const auto dir = temp_dir("coco_missing");
  std::ofstream(dir / "a.json") << R"({"images":[{"id":1,"file_name":"x.ppm","width":96,"height":96}],
    "annotations":[{"id":1,"image_id":42,"category_id":1,"bbox":[1,1,3,3]}],"categories":[{"id":1,"name":"disk"}]})";
  try {
    read_coco_json((dir / "a.json").string(), "", false);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos) << e.what();
  }
}

TEST(Coco, MalformedInputsAreRejected) {
  const auto dir = temp_dir("coco_bad");
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(read_coco_json((dir / "bad.json").string(), "", false), IoError);
  std::ofstream(dir / "oob.json") << R"({"images":[{"id":1,"file_name":"x.ppm","width":10,"height":10}],
    "annotations":[{"id":1,"image_id":1,"category_id":1,"bbox":[5,5,10,10]}],"categories":[{"id":1,"name":"disk"}]})";
  EXPECT_THROW(read_coco_json((dir / "oob.json").string(), "", false), IoError);
  EXPECT_THROW(read_coco_json((dir / "absent.json").string(), "", false), IoError);
  EXPECT_THROW(read_ppm((dir / "absent.ppm").string()), IoError);
}
