// sitspan: train / evaluate / predict / ablate / gen-data for satellite
// image time series panoptic and semantic segmentation.
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 divergence.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "sitspan/pastis_io.hpp"
#include "sitspan/trainer.hpp"

using namespace sitspan;

namespace {

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::ConfigError:
    case ErrorCode::InvalidFold:
    case ErrorCode::UnknownAblation:
      return 2;
    case ErrorCode::Divergence:
      return 4;
    default:
      return 3;
  }
}

struct CommonArgs {
  std::string config_path;
  int fold = -1;
  int64_t seed = -1;
  std::string out;
  std::string device = "cpu";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "run configuration (JSON)")
      ->required();
  cmd->add_option("--fold", args.fold, "cross-validation fold (1..5)");
  cmd->add_option("--seed", args.seed, "random seed override");
  cmd->add_option("--out", args.out, "output directory override");
  cmd->add_option("--device", args.device, "compute device (cpu)");
}

harness::RunConfig resolve_config(const CommonArgs& args) {
  check(args.device == "cpu", ErrorCode::ConfigError,
        "this build only supports --device cpu");
  harness::RunConfig cfg = harness::load_config_file(args.config_path);
  if (args.fold > 0) cfg.fold = args.fold;
  if (args.seed >= 0) cfg.seed = uint64_t(args.seed);
  if (!args.out.empty()) cfg.out_dir = args.out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"satellite image time series panoptic segmentation"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, predict_args, ablate_args, gen_args;
  bool resume = false;
  std::string ckpt, split = "test", sample_id;
  std::string variants_csv =
      "full,mean_attention,skip_mean,skip_mean_conv,batchnorm_encoder,single_date";
  int gen_n = -1;

  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd, train_args);
  train_cmd->add_flag("--resume", resume, "continue from the last checkpoint");

  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint directory");
  eval_cmd->add_option("--split", split, "train / val / test");

  auto* predict_cmd = app.add_subcommand("predict", "run one sample, emit figures");
  add_common(predict_cmd, predict_args);
  predict_cmd->add_option("--checkpoint", ckpt, "checkpoint directory");
  predict_cmd->add_option("--sample", sample_id, "sample id")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "train ablation variants");
  add_common(ablate_cmd, ablate_args);
  ablate_cmd->add_option("--variants", variants_csv, "comma-separated variant list");

  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset");
  add_common(gen_cmd, gen_args);
  gen_cmd->add_option("--n", gen_n, "number of sequences");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      harness::RunConfig cfg = resolve_config(train_args);
      harness::TrainResult r = harness::train(cfg, resume);
      std::printf("trained %d epochs; best %s %.4f at epoch %d\n", r.epochs_run,
                  cfg.task == harness::Task::semantic ? "mIoU" : "PQ",
                  r.best_metric, r.best_epoch);
      std::printf("best checkpoint: %s\n", r.best_dir.string().c_str());
    } else if (eval_cmd->parsed()) {
      harness::RunConfig cfg = resolve_config(eval_args);
      std::filesystem::path cp =
          ckpt.empty() ? std::filesystem::path(cfg.out_dir) / "checkpoints" / "best"
                       : std::filesystem::path(ckpt);
      auto report = harness::evaluate(
          cfg, cp, split, std::filesystem::path(cfg.out_dir) / ("eval_" + split));
      std::cout << report.dump(1) << "\n";
    } else if (predict_cmd->parsed()) {
      harness::RunConfig cfg = resolve_config(predict_args);
      std::filesystem::path cp =
          ckpt.empty() ? std::filesystem::path(cfg.out_dir) / "checkpoints" / "best"
                       : std::filesystem::path(ckpt);
      auto out = std::filesystem::path(cfg.out_dir) / ("predict_" + sample_id);
      harness::predict(cfg, cp, sample_id, out);
      std::printf("figures written to %s\n", out.string().c_str());
    } else if (ablate_cmd->parsed()) {
      harness::RunConfig cfg = resolve_config(ablate_args);
      std::vector<std::string> variants;
      std::stringstream ss(variants_csv);
      std::string tok;
      while (std::getline(ss, tok, ','))
        if (!tok.empty()) variants.push_back(tok);
      auto table = harness::ablate(cfg, variants,
                                   std::filesystem::path(cfg.out_dir) / "ablations");
      std::cout << table.dump(1) << "\n";
    } else if (gen_cmd->parsed()) {
      harness::RunConfig cfg = resolve_config(gen_args);
      int n = gen_n > 0 ? gen_n : cfg.gen_samples;
      auto samples = sitsgen::generate_dataset(cfg.gen, n);
      pastis_io::write_dataset(cfg.out_dir, samples, cfg.gen.labels());
      std::printf("wrote %d sequences to %s\n", n, cfg.out_dir.c_str());
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
