// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tsdet/tsdet.hpp"

using namespace tsdet;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> small_overrides(const std::string& out_dir) {
  return {"dataset.n_scenes=100",
          "dataset.labeled_fraction=0.1",
          "dataset.scene.height=48",
          "dataset.scene.width=48",
          "dataset.scene.min_size=10",
          "dataset.scene.max_size=24",
          "dataset.scene.max_instances=2",
          "detector.image_height=48",
          "detector.image_width=48",
          "detector.backbone_channels=[4,8,8]",
          "detector.rpn_hidden=8",
          "detector.roi_hidden=16",
          "detector.anchor_sizes=[12,24]",
          "detector.max_proposals=16",
          "train.batch_labeled=2",
          "train.batch_unlabeled=2",
          "train.tau=0.13",
          "train.burn_in_iters=6",
          "train.mutual_iters=6",
          "train.eval_every=4",
          "seeds=[1,2]",
          "output_dir=" + out_dir};
}

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("tsdet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

std::string without_timestamp(std::string manifest) {
  const auto k = manifest.find("\"timestamp\"");
  if (k == std::string::npos) return manifest;
  return manifest.erase(k, manifest.find('\n', k) - k);
}

}  // namespace

TEST(Config, DefaultsValidateAndRoundTrip) {
  const auto cfg = load_config("");
  EXPECT_EQ(cfg.dataset.n_scenes, 1000);
  EXPECT_DOUBLE_EQ(cfg.dataset.labeled_fraction, 0.05);
  const auto back = config_from_json(json::parse(config_to_json(cfg).dump()));
  EXPECT_EQ(config_to_json(back).dump(), config_to_json(cfg).dump());
}

TEST(Config, OverridesApplyInOrder) {
  const auto cfg = load_config("", {"train.tau=0.8", "train.roi_cls_kind=focal", "train.tau=0.75"});
  EXPECT_DOUBLE_EQ(cfg.train.tau, 0.75);
  EXPECT_EQ(cfg.train.roi_cls_kind, RoiClsKind::kFocal);
  EXPECT_EQ(cfg.overrides.size(), 3u);
}

TEST(Config, UnknownKeyIsRejectedByName) {
  try {
    load_config("", {"train.taux=0.8"});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.taux"), std::string::npos);
  }
  const auto dir = scratch_dir("cfg");
  std::ofstream(dir / "c.json") << R"({"train": {"tau": 0.7, "bogus": 1}})";
  EXPECT_THROW(load_config((dir / "c.json").string()), ConfigError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_config((dir / "bad.json").string()), ConfigError);
  EXPECT_THROW(load_config((dir / "missing.json").string()), IoError);
}

TEST(Config, InvalidValuesNameTheKey) {
  try {
    load_config("", {"train.tau=1.5"});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("tau"), std::string::npos);
  }
  EXPECT_THROW(load_config("", {"train.tau"}), ConfigError);
  EXPECT_THROW(load_config("", {"detector.image_height=64"}), ConfigError);
}

TEST(GenerateData, WritesSplitsAndIsReproducible) {
  const auto dir = scratch_dir("gen");
  const auto cfg = load_config("", small_overrides((dir / "run").string()));
  const auto a = cmd_generate_data(cfg, (dir / "a").string());
  cmd_generate_data(cfg, (dir / "b").string());
  EXPECT_EQ(a.sizes.labeled, 8);
  EXPECT_EQ(a.sizes.labeled + a.sizes.unlabeled, a.sizes.train);
  for (const char* f : {DatasetFiles::kLabeled, DatasetFiles::kUnlabeled, DatasetFiles::kHidden, DatasetFiles::kVal, DatasetFiles::kTest}) {
    ASSERT_TRUE(fs::exists(dir / "a" / f)) << f;
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  EXPECT_EQ(without_timestamp(slurp(dir / "a" / DatasetFiles::kManifest)), without_timestamp(slurp(dir / "b" / DatasetFiles::kManifest)));
  const auto m = json::parse(slurp(dir / "a" / DatasetFiles::kManifest));
  EXPECT_EQ(m["split_sizes"]["labeled"], 8);

  // The unlabeled file itself carries no annotations.
  const auto u = json::parse(slurp(dir / "a" / DatasetFiles::kUnlabeled));
  EXPECT_TRUE(!u.contains("annotations") || u["annotations"].empty());
}

TEST(GenerateData, LoadedDatasetEqualsGenerated) {
  const auto dir = scratch_dir("load");
  const auto cfg = load_config("", small_overrides((dir / "run").string()));
  cmd_generate_data(cfg, (dir / "data").string());
  const auto loaded = load_dataset((dir / "data").string());
  const auto gen = generate_dataset(cfg.dataset);
  ASSERT_EQ(loaded.labeled.size(), gen.labeled.size());
  ASSERT_EQ(loaded.unlabeled.size(), gen.unlabeled.size());
  ASSERT_EQ(loaded.test.size(), gen.test.size());
  for (std::size_t i = 0; i < gen.labeled.size(); ++i) {
    ASSERT_EQ(loaded.labeled[i].annotations.size(), gen.labeled[i].annotations.size());
    for (std::size_t k = 0; k < gen.labeled[i].annotations.size(); ++k)
      EXPECT_EQ(loaded.labeled[i].annotations[k].class_id, gen.labeled[i].annotations[k].class_id);
  }
  EXPECT_THROW(load_dataset((dir / "nope").string()), IoError);
}

TEST(Train, CsvRowsAndFiles) {
  const auto dir = scratch_dir("train");
  const auto cfg = load_config("", small_overrides((dir / "ssl").string()));
  const auto ssl = cmd_train(cfg, TrainMode::kSsl);
  // Rows at iterations 0, 4, 8, 12 (total 12), teacher plus student each.
  EXPECT_EQ(ssl.csv_rows, 8);
  EXPECT_EQ(count_lines(slurp(dir / "ssl" / "metrics.csv")), 9);
  for (const char* f : {"run_manifest.json", "final_eval.json", "checkpoints/teacher_final.tsdt", "checkpoints/student_final.tsdt",
                        "checkpoints/burn_in_final.tsdt"})
    EXPECT_TRUE(fs::exists(dir / "ssl" / f)) << f;

  auto sup_cfg = cfg;
  sup_cfg.output_dir = (dir / "sup").string();
  const auto sup = cmd_train(sup_cfg, TrainMode::kSupervisedOnly);
  EXPECT_EQ(sup.csv_rows, 4);
  EXPECT_TRUE(fs::exists(dir / "sup" / "checkpoints" / "supervised_final.tsdt"));
  EXPECT_THROW(parse_mode("both"), ConfigError);
}

TEST(Train, IdenticalConfigGivesByteIdenticalMetrics) {
  const auto dir = scratch_dir("det");
  const auto a = load_config("", small_overrides((dir / "a").string()));
  const auto b = load_config("", small_overrides((dir / "b").string()));
  cmd_train(a, TrainMode::kSsl);
  cmd_train(b, TrainMode::kSsl);
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(dir / "a" / "checkpoints" / "teacher_final.tsdt"), slurp(dir / "b" / "checkpoints" / "teacher_final.tsdt"));
}

TEST(Evaluate, RepeatableAndChecksInputs) {
  const auto dir = scratch_dir("eval");
  const auto cfg = load_config("", small_overrides((dir / "run").string()));
  cmd_train(cfg, TrainMode::kSupervisedOnly);
  const auto ckpt = (dir / "run" / "checkpoints" / "supervised_final.tsdt").string();
  std::ostringstream o1, o2;
  const auto r1 = cmd_evaluate(cfg, ckpt, "test", &o1);
  const auto first = slurp(dir / "run" / "eval_test.json");
  const auto r2 = cmd_evaluate(cfg, ckpt, "test", &o2);
  EXPECT_EQ(r1.map50, r2.map50);
  EXPECT_EQ(o1.str(), o2.str());
  EXPECT_EQ(first, slurp(dir / "run" / "eval_test.json"));
  EXPECT_THROW(cmd_evaluate(cfg, (dir / "missing.tsdt").string(), "test"), IoError);
  EXPECT_THROW(cmd_evaluate(cfg, ckpt, "train"), ConfigError);

  // A checkpoint from another architecture is rejected.
  auto other = cfg;
  other.detector.roi_hidden = 12;
  EXPECT_ANY_THROW(cmd_evaluate(other, ckpt, "test"));
}

TEST(Ablate, RowCountsAndPairs) {
  const auto dir = scratch_dir("ablate");
  auto ov = small_overrides((dir / "run").string());
  ov.push_back("train.burn_in_iters=2");
  ov.push_back("train.mutual_iters=2");
  const auto cfg = load_config("", ov);
  const auto res = cmd_ablate(cfg, "loss");
  EXPECT_EQ(res.runs.size(), 6u);
  ASSERT_EQ(res.pairs.size(), 3u);
  for (const auto& p : res.pairs) EXPECT_TRUE(p.report.has_value()) << p.a << " vs " << p.b;
  const auto csv = slurp(dir / "run" / "ablation_loss.csv");
  EXPECT_NE(csv.find("loss,margin,1,ok"), std::string::npos);
  const auto tj = json::parse(slurp(dir / "run" / "ablation_loss_ttests.json"));
  EXPECT_EQ(tj["pairs"].size(), 3u);
  EXPECT_THROW(cmd_ablate(cfg, "depth"), ConfigError);
}

TEST(Ablate, InitWithoutSkipsBurnIn) {
  auto cfg = load_config("", small_overrides("unused"));
  apply_ablation_setting(cfg, "init", "without");
  EXPECT_EQ(cfg.train.burn_in_iters, 0);
  EXPECT_EQ(cfg.train.mutual_iters, 6);
  auto w = load_config("", small_overrides("unused"));
  apply_ablation_setting(w, "init", "with");
  EXPECT_EQ(w.train.burn_in_iters, 6);
}
