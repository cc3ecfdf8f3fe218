#include "affuse/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "affuse/metrics.hpp"

namespace affuse {

namespace {

// Relative slack when comparing learning rates against min_lr, so a reduce
// landing within rounding of the floor snaps onto it instead of leaving an
// epsilon above that would trigger a second, phantom reduction.
constexpr double kLrSnap = 1e-9;

}  // namespace

void TrainerConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("trainer: batch_size must be positive");
  if (!(lr > 0.0) || !(min_lr > 0.0))
    throw std::invalid_argument("trainer: learning rates must be positive");
  if (min_lr > lr) throw std::invalid_argument("trainer: min_lr must not exceed lr");
  if (!(lr_factor > 0.0) || !(lr_factor < 1.0))
    throw std::invalid_argument("trainer: lr_factor must be in (0, 1)");
  if (patience == 0) throw std::invalid_argument("trainer: patience must be positive");
  if (early_stop == 0) throw std::invalid_argument("trainer: early_stop must be positive");
  if (max_epochs == 0) throw std::invalid_argument("trainer: max_epochs must be positive");
  if (!(weight_decay >= 0.0))
    throw std::invalid_argument("trainer: weight_decay must be non-negative");
  if (window.length == 0 || window.hop == 0 || window.hop > window.length)
    throw std::invalid_argument("trainer: need 0 < hop <= length");
}

const char* to_string(ControllerAction action) {
  switch (action) {
    case ControllerAction::none: return "none";
    case ControllerAction::reduce_lr: return "reduce_lr";
    case ControllerAction::release_group: return "release_group";
    case ControllerAction::stop: return "stop";
  }
  return "?";
}

ControllerResult controller_update(ControllerState& state, double val_ccc,
                                   const TrainerConfig& cfg,
                                   std::size_t releasable) {
  state.epoch += 1;
  ControllerResult out;
  if (val_ccc > state.best_val_ccc) {
    state.best_val_ccc = val_ccc;
    state.plateau = 0;
    state.stagnation = 0;
    out.improved = true;
  } else {
    state.plateau += 1;
    state.stagnation += 1;
  }

  if (state.stagnation >= cfg.early_stop) {
    out.action = ControllerAction::stop;
    return out;
  }

  if (state.plateau >= cfg.patience) {
    state.plateau = 0;
    const double floor_gate = cfg.min_lr * (1.0 + kLrSnap);
    if (state.lr > floor_gate) {
      double next = state.lr * cfg.lr_factor;
      if (next < floor_gate) next = cfg.min_lr;
      state.lr = next;
      out.action = ControllerAction::reduce_lr;
    } else if (state.released < releasable) {
      state.released += 1;
      out.action = ControllerAction::release_group;
    } else {
      out.action = ControllerAction::stop;
      return out;
    }
  }

  if (state.epoch >= cfg.max_epochs) out.action = ControllerAction::stop;
  return out;
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, double weight_decay)
    : params_(std::move(params)),
      slots_(params_.size()),
      frozen_(params_.size(), false),
      weight_decay_(weight_decay) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    slots_[i].m.assign(params_[i].numel(), 0.0);
    slots_[i].v.assign(params_[i].numel(), 0.0);
  }
}

void AdamOptimizer::set_frozen(std::size_t index, bool frozen) {
  frozen_.at(index) = frozen;
}

void AdamOptimizer::step(const GradientMap& grads, double lr) {
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (frozen_[i]) continue;
    const Tensor g = grads.grad(params_[i]);
    Slot& slot = slots_[i];
    auto& p = params_[i].values_mut();
    slot.steps += 1;
    const double corr1 = 1.0 - std::pow(beta1, static_cast<double>(slot.steps));
    const double corr2 = 1.0 - std::pow(beta2, static_cast<double>(slot.steps));
    for (std::size_t e = 0; e < p.size(); ++e) {
      const double ge = g.at(e) + weight_decay_ * p[e];
      slot.m[e] = beta1 * slot.m[e] + (1.0 - beta1) * ge;
      slot.v[e] = beta2 * slot.v[e] + (1.0 - beta2) * ge * ge;
      const double mhat = slot.m[e] / corr1;
      const double vhat = slot.v[e] / corr2;
      p[e] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

std::vector<TrainWindow> list_windows(const std::vector<PreparedTrial>& trials,
                                      const WindowSpec& spec) {
  std::vector<TrainWindow> out;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const std::size_t frames = trials[i].labels.size();
    for (std::size_t start : window_starts(frames, spec))
      out.push_back({i, start, std::min(spec.length, frames - start)});
  }
  return out;
}

WindowInput make_window_input(const PreparedTrial& trial, std::size_t start,
                              std::size_t length, bool want_aural) {
  const auto slice_cols = [&](const Tensor& m) {
    if (!m.defined())
      throw std::invalid_argument("make_window_input: missing modality");
    const std::size_t d = m.shape()[0];
    const std::size_t f = m.shape()[1];
    if (start >= f)
      throw std::invalid_argument("make_window_input: start beyond trial end");
    std::vector<double> v(d * length, 0.0);
    const std::size_t take = std::min(length, f - start);
    const auto& src = m.values();
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < take; ++c)
        v[r * length + c] = src[r * f + start + c];
    return Tensor({d, length}, std::move(v));
  };

  WindowInput in;
  in.visual = slice_cols(trial.visual);
  if (want_aural) {
    in.mfcc = slice_cols(trial.mfcc);
    in.vggish = slice_cols(trial.vggish);
  }
  return in;
}

void write_history_csv(const std::string& path,
                       const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_history_csv: cannot open " + path);
  out << "epoch,lr,plateau_counter,stagnation_counter,train_ccc,val_ccc,action\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%zu,%zu,%.17g,%.17g,", r.epoch,
                  r.lr, r.plateau, r.stagnation, r.train_ccc, r.val_ccc);
    out << buf << r.action << '\n';
  }
  out.flush();
  if (!out) throw std::runtime_error("write_history_csv: write failed: " + path);
}

Trainer::Trainer(Model& model, TrainerConfig cfg)
    : model_(model),
      cfg_(cfg),
      want_aural_(model.config().kind == ModelKind::multimodal),
      params_(model.parameters()),
      adam_(params_, cfg.weight_decay) {
  cfg_.validate();

  const auto groups = model_.parameter_groups();
  group_param_indices_.resize(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    for (const Tensor& t : groups[gi].params) {
      std::size_t pos = params_.size();
      for (std::size_t pi = 0; pi < params_.size(); ++pi)
        if (params_[pi].same_node(t)) {
          pos = pi;
          break;
        }
      if (pos == params_.size())
        throw std::logic_error("trainer: parameter group outside parameters()");
      group_param_indices_[gi].push_back(pos);
    }
  }

  if (cfg_.freeze_at_start) {
    for (std::size_t gi = 0; gi < groups.size(); ++gi)
      if (groups[gi].freezable) set_group_frozen(gi, true);
  }
}

void Trainer::set_group_frozen(std::size_t group, bool frozen) {
  for (std::size_t pi : group_param_indices_.at(group)) {
    params_[pi].set_requires_grad(!frozen);
    adam_.set_frozen(pi, frozen);
  }
}

double Trainer::train_epoch(const std::vector<PreparedTrial>& trials, double lr,
                            Rng& shuffle_rng, Rng& dropout_rng) {
  auto windows = list_windows(trials, cfg_.window);
  if (windows.empty()) throw std::runtime_error("train_epoch: no windows");
  shuffle_rng.shuffle(windows);

  std::vector<double> all_pred;
  std::vector<double> all_target;
  for (std::size_t b = 0; b < windows.size(); b += cfg_.batch_size) {
    const std::size_t batch_end = std::min(b + cfg_.batch_size, windows.size());
    Graph g;
    std::vector<Tensor> preds;
    std::vector<Tensor> targets;
    for (std::size_t w = b; w < batch_end; ++w) {
      const TrainWindow& win = windows[w];
      const PreparedTrial& trial = trials[win.trial];
      const WindowInput in =
          make_window_input(trial, win.start, cfg_.window.length, want_aural_);
      Tensor y = model_.forward(g, in, Mode::train, dropout_rng);
      if (win.valid_len < cfg_.window.length)
        y = g.slice1d(y, 0, win.valid_len);
      preds.push_back(y);
      targets.push_back(
          Tensor({win.valid_len},
                 std::vector<double>(trial.labels.begin() + win.start,
                                     trial.labels.begin() + win.start + win.valid_len)));
      const auto& yv = y.values();
      all_pred.insert(all_pred.end(), yv.begin(), yv.end());
      all_target.insert(all_target.end(), trial.labels.begin() + win.start,
                        trial.labels.begin() + win.start + win.valid_len);
    }
    const Tensor pred = preds.size() == 1 ? preds[0] : g.concat1d(preds);
    const Tensor target = targets.size() == 1 ? targets[0] : g.concat1d(targets);
    const Tensor loss = ccc_loss(g, pred, target);
    const GradientMap grads = g.backward(loss);
    adam_.step(grads, lr);
  }
  return ccc(all_pred, all_target);
}

double Trainer::evaluate(const std::vector<PreparedTrial>& trials) const {
  std::vector<double> all_pred;
  std::vector<double> all_target;
  Rng unused(0);
  for (const PreparedTrial& trial : trials) {
    const std::size_t frames = trial.labels.size();
    for (std::size_t start : window_starts(frames, cfg_.window)) {
      const std::size_t valid = std::min(cfg_.window.length, frames - start);
      Graph g(false);
      const WindowInput in =
          make_window_input(trial, start, cfg_.window.length, want_aural_);
      const Tensor y = model_.forward(g, in, Mode::eval, unused);
      const auto& yv = y.values();
      all_pred.insert(all_pred.end(), yv.begin(), yv.begin() + valid);
      all_target.insert(all_target.end(), trial.labels.begin() + start,
                        trial.labels.begin() + start + valid);
    }
  }
  return ccc(all_pred, all_target);
}

FitResult Trainer::fit(const std::vector<PreparedTrial>& train_trials,
                       const std::vector<PreparedTrial>& val_trials) {
  std::size_t releasable = 0;
  for (std::size_t gi = 0; gi < group_param_indices_.size(); ++gi) {
    const auto& idx = group_param_indices_[gi];
    if (!idx.empty() && adam_.frozen(idx.front())) ++releasable;
  }
  const std::vector<std::size_t> release_sequence = model_.release_order();

  std::vector<std::vector<double>> best;
  best.reserve(params_.size());
  for (const Tensor& p : params_) best.push_back(p.values());
  const auto snapshot = [&] {
    for (std::size_t i = 0; i < params_.size(); ++i) best[i] = params_[i].values();
  };
  const auto restore = [&] {
    for (std::size_t i = 0; i < params_.size(); ++i)
      params_[i].values_mut() = best[i];
  };

  Rng shuffle_rng(Rng::mix(cfg_.seed, 1));
  Rng dropout_rng(Rng::mix(cfg_.seed, 2));

  ControllerState state;
  state.lr = cfg_.lr;
  FitResult out;
  for (;;) {
    const double train_ccc =
        train_epoch(train_trials, state.lr, shuffle_rng, dropout_rng);
    const double val_ccc = evaluate(val_trials);
    const ControllerResult res =
        controller_update(state, val_ccc, cfg_, releasable);
    if (res.improved) {
      snapshot();
      out.best_val_ccc = val_ccc;
      out.best_epoch = state.epoch;
    }
    if (res.action == ControllerAction::release_group)
      set_group_frozen(release_sequence.at(state.released - 1), false);
    out.history.push_back({state.epoch, state.lr, state.plateau, state.stagnation,
                           train_ccc, val_ccc, to_string(res.action)});
    // the best state so far carries into the next epoch (and out of the loop)
    restore();
    if (res.action == ControllerAction::stop) break;
  }
  return out;
}

std::vector<double> predict_trial(const Model& model, const PreparedTrial& trial,
                                  const WindowSpec& spec) {
  if (!trial.visual.defined())
    throw std::invalid_argument("predict_trial: trial has no visual stream");
  const std::size_t frames = trial.visual.shape()[1];
  const bool want_aural = model.config().kind == ModelKind::multimodal;

  std::vector<double> acc(frames, 0.0);
  std::vector<std::size_t> hits(frames, 0);
  Rng unused(0);
  for (std::size_t start : window_starts(frames, spec)) {
    Graph g(false);
    const WindowInput in = make_window_input(trial, start, spec.length, want_aural);
    const Tensor y = model.forward(g, in, Mode::eval, unused);
    const std::size_t valid = std::min(spec.length, frames - start);
    for (std::size_t i = 0; i < valid; ++i) {
      acc[start + i] += y.at(i);
      hits[start + i] += 1;
    }
  }
  for (std::size_t f = 0; f < frames; ++f)
    acc[f] /= static_cast<double>(hits[f]);
  return acc;
}

}  // namespace affuse
