// SPDX-License-Identifier: Apache-2.0
//
// tsdet command-line interface.
//   tsdet_cli generate-data --config c.json --out data/
//   tsdet_cli train --config c.json --mode ssl
//   tsdet_cli evaluate --config c.json --checkpoint ck.tsdt --split test
//   tsdet_cli ablate --config c.json --axis loss
//   tsdet_cli grad-check --seeds 10
// Exit codes: 0 success, 1 other error, 2 configuration error, 3 numeric failure.
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tsdet/tsdet.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  long long seed = -1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config file");
  app->add_option("--set", c.sets, "override, key=value (repeatable)");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--seed", c.seed, "training seed (train.seed)");
}

tsdet::ExperimentConfig load(const Common& c) {
  std::vector<std::string> sets = c.sets;
  if (c.out.size()) sets.push_back("output_dir=\"" + c.out + "\"");
  if (c.seed >= 0) sets.push_back("train.seed=" + std::to_string(c.seed));
  return tsdet::load_config(c.config, sets);
}

int grad_check_command(int seeds) {
  using namespace tsdet;
  DetectorConfig d;
  d.image_height = d.image_width = 32;
  d.backbone_channels = {2, 3, 4};
  d.rpn_hidden = 4;
  d.roi_hidden = 6;
  d.max_proposals = 6;
  d.anchor_sizes = {8, 16};
  bool all = true;
  for (int s = 0; s < seeds; ++s) {
    SceneConfig sc;
    sc.height = sc.width = 32;
    sc.min_size = 8;
    sc.max_size = 20;
    sc.max_instances = 2;
    sc.noise_std = 0;
    const Scene scene = generate_scene(static_cast<std::uint64_t>(100 + s), sc);
    // Perturbed away from the small-head init so every gradient is non-trivial.
    BasicParameterSet<double> point = init_detector_params(d, static_cast<std::uint64_t>(s)).cast<double>();
    Rng jitter(static_cast<std::uint64_t>(s) + 77);
    for (std::size_t i = 0; i < point.size(); ++i)
      for (auto& x : point.at(i).data) x += jitter.uniform(-0.3, 0.3);
    for (auto kind : {RoiClsKind::kMargin, RoiClsKind::kCrossEntropy, RoiClsKind::kFocal}) {
      LossOptions opt;
      opt.roi_cls = kind;
      ScalarFn<double> f = [&](BasicTape<double>& tape, BasicParameterSet<double>& p) {
        auto v = bind_params(tape, p, d);
        Rng rng(static_cast<std::uint64_t>(s));
        const Tensor img = scene.image;
        std::vector<const Tensor*> imgs{&img};
        auto out = forward_for_training(tape, v, imgs, {scene.annotations}, d, rng);
        return supervised_loss(out, opt, rng).total;
      };
      GradCheckOptions gopt;
      gopt.h = 1e-6;
      gopt.abs_tol = 1e-9;
      gopt.max_probes_per_tensor = 4;
      gopt.probe_seed = static_cast<std::uint64_t>(s);
      const auto r = grad_check<double>(f, point, gopt);
      std::cout << "seed " << s << " loss " << roi_cls_name(kind) << " checked " << r.checked << " max_rel_err " << r.max_rel_err
                << (r.pass ? " PASS" : " FAIL (" + r.worst_param + ")") << '\n';
      all = all && r.pass;
    }
  }
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher-student semi-supervised object detection"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, abl_c;
  auto* gen = app.add_subcommand("generate-data", "generate the synthetic dataset with COCO annotations");
  add_common(gen, gen_c);

  std::string mode = "ssl";
  auto* train = app.add_subcommand("train", "train a detector");
  add_common(train, train_c);
  train->add_option("--mode", mode, "ssl or supervised_only");

  std::string checkpoint, split = "test";
  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--split", split, "test, val, train_labeled or train_unlabeled");

  std::string axis;
  auto* abl = app.add_subcommand("ablate", "sweep one hyper-parameter across seeds");
  add_common(abl, abl_c);
  abl->add_option("--axis", axis, "tau, alpha_ema, s, init or loss")->required();

  int gc_seeds = 10;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the training losses");
  gc->add_option("--seeds", gc_seeds, "number of seeds");

  CLI11_PARSE(app, argc, argv);

  using namespace tsdet;
  try {
    if (*gen) {
      auto cfg = load(gen_c);
      const std::string dir = gen_c.out.size() ? gen_c.out : (cfg.dataset.dir.size() ? cfg.dataset.dir : std::string("data"));
      const auto r = cmd_generate_data(cfg, dir);
      std::cout << "wrote " << r.dir.string() << ": labeled " << r.sizes.labeled << ", unlabeled " << r.sizes.unlabeled << ", val " << r.sizes.val
                << ", test " << r.sizes.test << '\n';
    } else if (*train) {
      const auto cfg = load(train_c);
      TrainOptions opt;
      opt.log = &std::cout;
      const auto m = parse_mode(mode);
      const auto s = cmd_train(cfg, m, opt);
      std::cout << "test " << (m == TrainMode::kSsl ? "teacher: " : ": ") << regime_summary(s.final_teacher) << '\n';
    } else if (*eval) {
      const auto cfg = load(eval_c);
      cmd_evaluate(cfg, checkpoint, split, &std::cout);
    } else if (*abl) {
      const auto cfg = load(abl_c);
      TrainOptions opt;
      opt.log = &std::cout;
      const auto r = cmd_ablate(cfg, axis, opt);
      for (const auto& setting : r.settings) {
        const auto st = setting_stats(r, setting);
        std::cout << axis << "=" << setting << ": teacher mAP50 mean " << st.mean << " stdev " << st.stdev << " (n=" << st.n << ")\n";
      }
      for (const auto& p : r.pairs) {
        std::cout << p.a << " vs " << p.b << ": ";
        if (p.report) std::cout << "t=" << p.report->t_statistic << " p=" << p.report->p_value << '\n';
        else std::cout << "insufficient paired runs\n";
      }
    } else if (*gc) {
      return grad_check_command(gc_seeds);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
