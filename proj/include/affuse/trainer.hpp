#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "affuse/data.hpp"
#include "affuse/model.hpp"
#include "affuse/tensor.hpp"

namespace affuse {

struct TrainerConfig {
  std::size_t batch_size = 2;
  double lr = 1e-5;
  double min_lr = 1e-6;
  std::size_t patience = 5;
  double lr_factor = 0.1;
  std::size_t early_stop = 20;
  std::size_t max_epochs = 100;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  // Freezable groups start frozen and are released by the controller.
  bool freeze_at_start = true;
  WindowSpec window;

  void validate() const;
};

enum class ControllerAction { none, reduce_lr, release_group, stop };

const char* to_string(ControllerAction action);

struct ControllerState {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::size_t plateau = 0;
  std::size_t stagnation = 0;
  std::size_t released = 0;
  double best_val_ccc = -2.0;  // below any reachable CCC
};

struct ControllerResult {
  ControllerAction action = ControllerAction::none;
  bool improved = false;
};

// One call per epoch, after validation. Improvement resets both counters;
// otherwise a plateau hitting patience first drains the learning rate to
// min_lr, then releases frozen groups one per trigger, and stops once
// nothing is left to release. Stagnation hitting early_stop or the epoch
// hitting max_epochs stops regardless.
ControllerResult controller_update(ControllerState& state, double val_ccc,
                                   const TrainerConfig& cfg,
                                   std::size_t releasable);

// Adam with coupled L2 weight decay. Moment buffers and step counts are per
// parameter and advance only on actual updates, so a parameter released late
// starts with fresh bias correction.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, double weight_decay);

  void set_frozen(std::size_t index, bool frozen);
  bool frozen(std::size_t index) const { return frozen_[index]; }
  std::size_t size() const { return params_.size(); }

  void step(const GradientMap& grads, double lr);

 private:
  struct Slot {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t steps = 0;
  };

  std::vector<Tensor> params_;
  std::vector<Slot> slots_;
  std::vector<bool> frozen_;
  double weight_decay_;
};

struct TrainWindow {
  std::size_t trial = 0;      // index into the trial vector
  std::size_t start = 0;      // first frame
  std::size_t valid_len = 0;  // frames before zero padding begins
};

std::vector<TrainWindow> list_windows(const std::vector<PreparedTrial>& trials,
                                      const WindowSpec& spec);

// Copies frames [start, start+length) of a trial into model input form,
// zero-padding past the trial end.
WindowInput make_window_input(const PreparedTrial& trial, std::size_t start,
                              std::size_t length, bool want_aural);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::size_t plateau = 0;
  std::size_t stagnation = 0;
  double train_ccc = 0.0;
  double val_ccc = 0.0;
  std::string action;
};

void write_history_csv(const std::string& path,
                       const std::vector<EpochRecord>& history);

struct FitResult {
  double best_val_ccc = -2.0;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
};

// Owns one model for the duration of a fit. The model ends up holding the
// best-validation parameters.
class Trainer {
 public:
  Trainer(Model& model, TrainerConfig cfg);

  FitResult fit(const std::vector<PreparedTrial>& train_trials,
                const std::vector<PreparedTrial>& val_trials);

  // One shuffled pass; returns the CCC of the training-mode predictions.
  double train_epoch(const std::vector<PreparedTrial>& trials, double lr,
                     Rng& shuffle_rng, Rng& dropout_rng);

  // Global CCC over all windows of all trials, eval mode.
  double evaluate(const std::vector<PreparedTrial>& trials) const;

 private:
  Model& model_;
  TrainerConfig cfg_;
  bool want_aural_;
  std::vector<Tensor> params_;
  std::vector<std::vector<std::size_t>> group_param_indices_;
  AdamOptimizer adam_;

  void set_group_frozen(std::size_t group, bool frozen);
};

// Full-trial prediction: overlapped windows per window_starts, frame
// predictions averaged where windows overlap. Unclipped.
std::vector<double> predict_trial(const Model& model, const PreparedTrial& trial,
                                  const WindowSpec& spec);

}  // namespace affuse
