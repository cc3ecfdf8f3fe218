#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "affuse/ensemble.hpp"
#include "affuse/model.hpp"
#include "affuse/trainer.hpp"

// Command implementations behind the affuse binary. Every command throws on
// failure; the binary maps exceptions to an error line and a nonzero exit.

namespace affuse {

struct RunConfig {
  std::string manifest;      // raw trial listing
  std::string prepared_dir;  // synchronized artifacts, in and out
  std::string folds_file;
  std::string dimension = "valence";
  ModelKind model_kind = ModelKind::multimodal;
  std::uint64_t seed = 1;
  TrainerConfig trainer;  // carries the window spec
  ModelConfig network;    // input widths are read from the data at train time
};

// Strict parse: unknown keys anywhere in the document are errors. Relative
// paths resolve against the config file's directory.
RunConfig load_run_config(const std::string& path);

// Synchronize, mask, pad, and normalize every manifest trial into
// cfg.prepared_dir, plus index.json and stats.json.
void cmd_prepare(const RunConfig& cfg);

// Subject-disjoint cross-validation splits of the manifest into
// cfg.folds_file.
void cmd_folds(const RunConfig& cfg);

// Train one fold and dimension; writes model.afmd and history.csv under
// out_dir/<dimension>/fold<fold>/.
void cmd_train(const RunConfig& cfg, std::size_t fold,
               const std::string& dimension, const std::string& out_dir);

// Run a checkpoint over every prepared trial; one trace CSV per trial.
void cmd_predict(const RunConfig& cfg, const std::string& checkpoint,
                 const std::string& out_dir);

// Merge aligned per-fold trace directories (same file names in each).
void cmd_merge(const std::vector<std::string>& trace_dirs, MergePolicy policy,
               const std::string& out_dir);

// Per-trial CCC of traces against prepared labels, plus an overall row over
// the concatenated frames.
void cmd_eval(const RunConfig& cfg, const std::string& traces_dir,
              const std::string& dimension, const std::string& out_file);

// Expands "both" to every label dimension in the prepared index.
std::vector<std::string> train_dimensions(const RunConfig& cfg,
                                          const std::string& requested);

}  // namespace affuse
