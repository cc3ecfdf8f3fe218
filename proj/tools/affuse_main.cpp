#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "affuse/cli.hpp"
#include "affuse/gradcheck.hpp"

int main(int argc, char** argv) {
  CLI::App app{"continuous valence/arousal regression over precomputed "
               "audio-visual features"};
  app.require_subcommand(1);

  std::string config_path;
  std::string dimension;
  std::string checkpoint;
  std::string policy = "late";
  std::string out;
  std::string traces_dir;
  std::vector<std::string> trace_dirs;
  std::size_t fold = 0;
  std::uint64_t seed = 0;

  CLI::App* prepare = app.add_subcommand(
      "prepare", "synchronize manifest trials into training artifacts");
  prepare->add_option("--config", config_path, "run configuration JSON")
      ->required();

  CLI::App* folds = app.add_subcommand(
      "folds", "write subject-disjoint cross-validation splits");
  folds->add_option("--config", config_path, "run configuration JSON")->required();
  CLI::Option* folds_seed = folds->add_option("--seed", seed, "override the config seed");

  CLI::App* train = app.add_subcommand("train", "fit one fold of one dimension");
  train->add_option("--config", config_path, "run configuration JSON")->required();
  train->add_option("--fold", fold, "fold index")->required();
  train->add_option("--dimension", dimension,
                    "label dimension, or 'both' for all of them");
  train->add_option("--out", out, "output directory")->required();
  CLI::Option* train_seed = train->add_option("--seed", seed, "override the config seed");

  CLI::App* predict = app.add_subcommand(
      "predict", "run a checkpoint over every prepared trial");
  predict->add_option("checkpoint", checkpoint, "model checkpoint")->required();
  predict->add_option("--config", config_path, "run configuration JSON")->required();
  predict->add_option("--out", out, "trace output directory")->required();

  CLI::App* merge = app.add_subcommand(
      "merge", "merge aligned per-fold trace directories");
  merge->add_option("dirs", trace_dirs, "trace directories")->required();
  merge->add_option("--policy", policy, "early or late clipping");
  merge->add_option("--out", out, "merged trace directory")->required();

  CLI::App* eval = app.add_subcommand(
      "eval", "CCC of traces against prepared labels");
  eval->add_option("traces", traces_dir, "trace directory")->required();
  eval->add_option("--config", config_path, "run configuration JSON")->required();
  eval->add_option("--dimension", dimension, "label dimension");
  eval->add_option("--out", out, "report CSV path")->required();

  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference audit of every layer and the full models");

  try {
    app.parse(argc, argv);

    const auto load_cfg = [&](bool seed_override) {
      affuse::RunConfig cfg = affuse::load_run_config(config_path);
      if (seed_override) {
        cfg.seed = seed;
        cfg.trainer.seed = seed;
      }
      return cfg;
    };

    if (prepare->parsed()) {
      affuse::cmd_prepare(load_cfg(false));
    } else if (folds->parsed()) {
      affuse::cmd_folds(load_cfg(folds_seed->count() > 0));
    } else if (train->parsed()) {
      const affuse::RunConfig cfg = load_cfg(train_seed->count() > 0);
      for (const auto& dim : affuse::train_dimensions(cfg, dimension))
        affuse::cmd_train(cfg, fold, dim, out);
    } else if (predict->parsed()) {
      affuse::cmd_predict(load_cfg(false), checkpoint, out);
    } else if (merge->parsed()) {
      affuse::cmd_merge(trace_dirs, affuse::merge_policy_from_string(policy), out);
    } else if (eval->parsed()) {
      const affuse::RunConfig cfg = load_cfg(false);
      affuse::cmd_eval(cfg, traces_dir,
                       dimension.empty() ? cfg.dimension : dimension, out);
    } else if (gradcheck->parsed()) {
      return affuse::run_gradcheck_battery(true) ? 0 : 1;
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
