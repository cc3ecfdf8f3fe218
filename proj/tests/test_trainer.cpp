#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "affuse/data.hpp"
#include "affuse/model.hpp"
#include "affuse/rng.hpp"
#include "affuse/trainer.hpp"
#include "doctest.h"
#include "support/helpers.hpp"

using namespace affuse;

namespace {

ModelConfig tiny_net() {
  ModelConfig cfg;
  cfg.kind = ModelKind::multimodal;
  cfg.visual_dim = 3;
  cfg.mfcc_dim = 2;
  cfg.vggish_dim = 2;
  cfg.visual_channels = 4;
  cfg.aural_channels = 3;
  cfg.levels = 1;
  cfg.kernel_size = 2;
  cfg.dropout = 0.1;
  cfg.attention_dim = 2;
  return cfg;
}

TrainerConfig tiny_trainer() {
  TrainerConfig cfg;
  cfg.batch_size = 2;
  cfg.lr = 1e-3;
  cfg.min_lr = 1e-4;
  cfg.patience = 2;
  cfg.lr_factor = 0.1;
  cfg.early_stop = 5;
  cfg.max_epochs = 3;
  cfg.weight_decay = 1e-4;
  cfg.seed = 9;
  cfg.window = WindowSpec{12, 8};
  return cfg;
}

std::vector<PreparedTrial> tiny_trials(std::uint64_t seed, std::size_t count,
                                       std::size_t frames) {
  Rng rng(seed);
  std::vector<PreparedTrial> out;
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(test::random_trial(rng, "t" + std::to_string(i),
                                     "s" + std::to_string(i), frames, 3, 2, 2));
  return out;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const Tensor& p : params) out.push_back(p.values());
  return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("controller walks the reduce, release, release, stop ladder") {
  TrainerConfig cfg;
  cfg.lr = 1e-5;
  cfg.min_lr = 1e-6;
  cfg.lr_factor = 0.1;
  cfg.patience = 5;
  cfg.early_stop = 20;
  cfg.max_epochs = 100;

  ControllerState st;
  st.lr = cfg.lr;
  st.best_val_ccc = 0.5;  // the flat trace below never improves on this

  std::vector<ControllerAction> actions;
  for (int epoch = 1; epoch <= 20; ++epoch) {
    const ControllerResult res = controller_update(st, 0.5, cfg, 2);
    actions.push_back(res.action);
    CHECK_FALSE(res.improved);
    if (res.action == ControllerAction::stop) break;
  }

  REQUIRE(actions.size() == 20);
  for (int epoch = 1; epoch <= 20; ++epoch) {
    const ControllerAction a = actions[epoch - 1];
    if (epoch == 5) {
      CHECK(a == ControllerAction::reduce_lr);
    } else if (epoch == 10 || epoch == 15) {
      CHECK(a == ControllerAction::release_group);
    } else if (epoch == 20) {
      CHECK(a == ControllerAction::stop);
    } else {
      CHECK(a == ControllerAction::none);
    }
  }
  // One decade at factor 0.1 must land exactly on the floor, not an epsilon
  // above it, or the ladder would spend a second trigger on a phantom reduce.
  CHECK(st.lr == 1e-6);
  CHECK(st.released == 2);
}

TEST_CASE("stagnation stops the run even with releases left") {
  TrainerConfig cfg;
  cfg.lr = 1e-5;
  cfg.min_lr = 1e-6;
  cfg.lr_factor = 0.1;
  cfg.patience = 5;
  cfg.early_stop = 12;
  cfg.max_epochs = 100;

  ControllerState st;
  st.lr = cfg.lr;
  st.best_val_ccc = 0.5;

  std::vector<ControllerAction> actions;
  for (int epoch = 1; epoch <= 12; ++epoch)
    actions.push_back(controller_update(st, 0.5, cfg, 3).action);

  CHECK(actions[4] == ControllerAction::reduce_lr);
  CHECK(actions[9] == ControllerAction::release_group);
  CHECK(actions[10] == ControllerAction::none);
  CHECK(actions[11] == ControllerAction::stop);  // stagnation, not plateau
  CHECK(st.released == 1);
}

TEST_CASE("improvement resets both counters") {
  TrainerConfig cfg;
  cfg.lr = 1e-5;
  cfg.min_lr = 1e-6;
  cfg.lr_factor = 0.1;
  cfg.patience = 2;
  cfg.early_stop = 4;
  cfg.max_epochs = 100;

  ControllerState st;
  st.lr = cfg.lr;

  const std::vector<double> vals{0.1, 0.2, 0.1, 0.1, 0.1, 0.1};
  std::vector<ControllerAction> actions;
  std::vector<bool> improved;
  for (double v : vals) {
    const ControllerResult res = controller_update(st, v, cfg, 1);
    actions.push_back(res.action);
    improved.push_back(res.improved);
  }
  CHECK(improved == std::vector<bool>{true, true, false, false, false, false});
  CHECK(actions ==
        std::vector<ControllerAction>{
            ControllerAction::none, ControllerAction::none,
            ControllerAction::none, ControllerAction::reduce_lr,
            ControllerAction::none, ControllerAction::stop});
  CHECK(st.best_val_ccc == 0.2);
}

TEST_CASE("an exhausted ladder stops on the next plateau") {
  TrainerConfig cfg;
  cfg.lr = 1e-6;
  cfg.min_lr = 1e-6;  // already on the floor
  cfg.patience = 5;
  cfg.early_stop = 50;
  cfg.max_epochs = 100;

  ControllerState st;
  st.lr = cfg.lr;
  st.best_val_ccc = 0.5;

  ControllerAction last = ControllerAction::none;
  for (int epoch = 1; epoch <= 5; ++epoch)
    last = controller_update(st, 0.5, cfg, 0).action;
  CHECK(last == ControllerAction::stop);
  CHECK(st.epoch == 5);
}

TEST_CASE("the epoch budget stops an improving run") {
  TrainerConfig cfg;
  cfg.max_epochs = 3;
  ControllerState st;
  st.lr = cfg.lr;
  CHECK(controller_update(st, 0.1, cfg, 0).action == ControllerAction::none);
  CHECK(controller_update(st, 0.2, cfg, 0).action == ControllerAction::none);
  const ControllerResult res = controller_update(st, 0.3, cfg, 0);
  CHECK(res.improved);
  CHECK(res.action == ControllerAction::stop);
}

TEST_CASE("adam's first step has the textbook magnitude") {
  Tensor p({1}, {1.0}, true);
  AdamOptimizer adam({p}, 0.0);
  Graph g;
  adam.step(g.backward(g.sum(p)), 0.1);
  // Bias correction makes the first step lr * g / (|g| + eps).
  CHECK(p.at(0) == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("weight decay pulls parameters toward zero on its own") {
  Tensor p({1}, {2.0}, true);
  Tensor q({1}, {1.0}, true);
  AdamOptimizer adam({p, q}, 0.5);
  Graph g;
  adam.step(g.backward(g.sum(q)), 0.1);  // p is off the loss path
  CHECK(p.at(0) == doctest::Approx(2.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("zero gradient and zero decay leave parameters untouched") {
  Tensor p({3}, {1.0, -2.0, 3.0}, true);
  Tensor q({1}, {1.0}, true);
  AdamOptimizer adam({p, q}, 0.0);
  Graph g;
  adam.step(g.backward(g.sum(q)), 0.1);
  CHECK(p.values() == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adam minimizes a quadratic bowl") {
  Tensor p({1}, {1.0}, true);
  AdamOptimizer adam({p}, 0.0);
  for (int i = 0; i < 600; ++i) {
    Graph g;
    adam.step(g.backward(g.mul(p, p)), 0.05);
  }
  CHECK(std::abs(p.at(0)) < 1e-3);
}

TEST_CASE("frozen parameters restart with fresh moments when released") {
  Tensor a({1}, {1.0}, true);
  Tensor b({1}, {1.0}, true);
  AdamOptimizer adam({a, b}, 0.0);
  adam.set_frozen(1, true);

  for (int i = 0; i < 3; ++i) {
    Graph g;
    adam.step(g.backward(g.sum(g.add(a, b))), 0.1);
  }
  CHECK(b.at(0) == 1.0);  // bitwise untouched while frozen
  CHECK(a.at(0) < 1.0);

  adam.set_frozen(1, false);
  Graph g;
  adam.step(g.backward(g.sum(g.add(a, b))), 0.1);

  // b's first real step matches a brand new optimizer's first step.
  Tensor fresh({1}, {1.0}, true);
  AdamOptimizer adam2({fresh}, 0.0);
  Graph g2;
  adam2.step(g2.backward(g2.sum(fresh)), 0.1);
  CHECK(b.at(0) == fresh.at(0));
}

TEST_CASE("window listing covers every trial") {
  std::vector<PreparedTrial> trials = tiny_trials(1, 1, 30);
  const WindowSpec spec{12, 8};
  const std::vector<TrainWindow> wins = list_windows(trials, spec);
  // 30 frames: starts 0, 8, 16, plus the end-aligned 18.
  REQUIRE(wins.size() == 4);
  CHECK(wins[0].start == 0);
  CHECK(wins[1].start == 8);
  CHECK(wins[2].start == 16);
  CHECK(wins[3].start == 18);
  for (const TrainWindow& w : wins) {
    CHECK(w.trial == 0);
    CHECK(w.valid_len == 12);
  }

  std::vector<PreparedTrial> small = tiny_trials(2, 2, 7);
  const std::vector<TrainWindow> swins = list_windows(small, spec);
  REQUIRE(swins.size() == 2);
  CHECK(swins[0].trial == 0);
  CHECK(swins[1].trial == 1);
  CHECK(swins[0].valid_len == 7);  // shorter than the window, zero padded
}

TEST_CASE("window inputs slice and zero-pad the feature matrices") {
  Rng rng(5);
  PreparedTrial trial = test::random_trial(rng, "t", "s", 5, 2, 2, 2);
  const WindowInput in = make_window_input(trial, 3, 4, true);
  REQUIRE(in.visual.rows() == 2);
  REQUIRE(in.visual.cols() == 4);
  for (std::size_t d = 0; d < 2; ++d) {
    CHECK(in.visual.at(d, 0) == trial.visual.at(d, 3));
    CHECK(in.visual.at(d, 1) == trial.visual.at(d, 4));
    CHECK(in.visual.at(d, 2) == 0.0);
    CHECK(in.visual.at(d, 3) == 0.0);
    CHECK(in.mfcc.at(d, 0) == trial.mfcc.at(d, 3));
  }
  const WindowInput lean = make_window_input(trial, 0, 4, false);
  CHECK(lean.visual.defined());
  CHECK_FALSE(lean.mfcc.defined());
  CHECK_FALSE(lean.vggish.defined());
}

TEST_CASE("a zeroed network with a head bias predicts a constant") {
  Rng rng(7);
  Model model(tiny_net());
  model.init(rng);
  std::vector<Tensor> params = model.parameters();
  for (Tensor& p : params)
    std::fill(p.values_mut().begin(), p.values_mut().end(), 0.0);
  REQUIRE(params.back().numel() == 1);  // the head bias comes last
  params.back().values_mut()[0] = 0.37;

  std::vector<PreparedTrial> trials = tiny_trials(3, 1, 700);
  const std::vector<double> trace =
      predict_trial(model, trials[0], WindowSpec{300, 200});
  REQUIRE(trace.size() == 700);
  for (double v : trace) CHECK(v == 0.37);
}

TEST_CASE("trial prediction averages overlapped windows") {
  Rng rng(9);
  Model model(tiny_net());
  model.init(rng);
  const WindowSpec spec{120, 80};
  std::vector<PreparedTrial> trials = tiny_trials(11, 1, 260);
  const PreparedTrial& trial = trials[0];

  const std::vector<double> got = predict_trial(model, trial, spec);

  std::vector<double> acc(260, 0.0);
  std::vector<double> hits(260, 0.0);
  for (std::size_t start : window_starts(260, spec)) {
    const WindowInput in = make_window_input(trial, start, spec.length, true);
    Rng unused(0);
    Graph g(false);
    const Tensor pred = model.forward(g, in, Mode::eval, unused);
    const std::size_t valid = std::min<std::size_t>(spec.length, 260 - start);
    for (std::size_t i = 0; i < valid; ++i) {
      acc[start + i] += pred.at(i);
      hits[start + i] += 1.0;
    }
  }
  REQUIRE(got.size() == acc.size());
  for (std::size_t f = 0; f < acc.size(); ++f)
    CHECK(got[f] == acc[f] / hits[f]);

  // A trial shorter than one window keeps only its real frames.
  std::vector<PreparedTrial> small = tiny_trials(13, 1, 50);
  CHECK(predict_trial(model, small[0], spec).size() == 50);
}

TEST_CASE("training a fold leaves the best-validation parameters in place") {
  Rng rng(15);
  Model model(tiny_net());
  model.init(rng);
  Trainer trainer(model, tiny_trainer());
  const std::vector<PreparedTrial> train = tiny_trials(17, 3, 30);
  const std::vector<PreparedTrial> val = tiny_trials(19, 2, 20);

  const FitResult res = trainer.fit(train, val);
  REQUIRE_FALSE(res.history.empty());
  CHECK(res.history.size() <= 3);
  for (const EpochRecord& r : res.history) {
    CHECK(std::isfinite(r.train_ccc));
    CHECK(std::isfinite(r.val_ccc));
    CHECK(r.val_ccc <= 1.0 + 1e-9);
    CHECK(r.val_ccc >= -1.0 - 1e-9);
  }
  CHECK(res.best_epoch >= 1);

  // The carried parameters are the snapshot that produced best_val_ccc, so
  // re-running validation must reproduce it to the last bit.
  CHECK(trainer.evaluate(val) == res.best_val_ccc);
}

TEST_CASE("identical seeds give identical training runs") {
  const std::vector<PreparedTrial> train = tiny_trials(21, 3, 30);
  const std::vector<PreparedTrial> val = tiny_trials(23, 2, 20);

  auto run = [&] {
    Rng rng(500);
    Model model(tiny_net());
    model.init(rng);
    Trainer trainer(model, tiny_trainer());
    const FitResult res = trainer.fit(train, val);
    return std::make_pair(res, snapshot(model.parameters()));
  };

  const auto [res_a, params_a] = run();
  const auto [res_b, params_b] = run();
  REQUIRE(res_a.history.size() == res_b.history.size());
  for (std::size_t i = 0; i < res_a.history.size(); ++i) {
    CHECK(res_a.history[i].train_ccc == res_b.history[i].train_ccc);
    CHECK(res_a.history[i].val_ccc == res_b.history[i].val_ccc);
    CHECK(res_a.history[i].lr == res_b.history[i].lr);
    CHECK(res_a.history[i].action == res_b.history[i].action);
  }
  CHECK(res_a.best_val_ccc == res_b.best_val_ccc);
  CHECK(params_a == params_b);
}

TEST_CASE("frozen groups sit out the whole fit") {
  Rng rng(25);
  Model model(tiny_net());
  model.init(rng);

  const std::vector<ParameterGroup> groups = model.parameter_groups();
  std::vector<std::vector<double>> frozen_before, open_before;
  for (const ParameterGroup& grp : groups) {
    for (const Tensor& p : grp.params)
      (grp.freezable ? frozen_before : open_before).push_back(p.values());
  }

  TrainerConfig cfg = tiny_trainer();
  cfg.patience = 10;  // nothing ever releases within two epochs
  cfg.max_epochs = 2;
  cfg.freeze_at_start = true;
  Trainer trainer(model, cfg);
  trainer.fit(tiny_trials(27, 3, 30), tiny_trials(29, 2, 20));

  std::vector<std::vector<double>> frozen_after, open_after;
  for (const ParameterGroup& grp : model.parameter_groups()) {
    for (const Tensor& p : grp.params)
      (grp.freezable ? frozen_after : open_after).push_back(p.values());
  }
  CHECK(frozen_before == frozen_after);  // bitwise
  CHECK(open_before != open_after);      // the heads actually trained
}

TEST_CASE("a zero learning rate changes nothing") {
  Rng rng(31);
  Model model(tiny_net());
  model.init(rng);
  Trainer trainer(model, tiny_trainer());
  const std::vector<std::vector<double>> before =
      snapshot(model.parameters());
  Rng shuffle(1), dropout(2);
  const std::vector<PreparedTrial> trials = tiny_trials(33, 2, 30);
  const double train_ccc = trainer.train_epoch(trials, 0.0, shuffle, dropout);
  CHECK(std::isfinite(train_ccc));
  CHECK(snapshot(model.parameters()) == before);
}

TEST_CASE("fit learns a predictable target") {
  Rng gen(35);
  std::vector<double> readout(3 + 2 + 2);
  for (double& w : readout) w = gen.uniform(-0.6, 0.6);
  std::vector<PreparedTrial> train, val;
  for (int i = 0; i < 3; ++i)
    train.push_back(test::learnable_trial(gen, "lt" + std::to_string(i),
                                          "ls" + std::to_string(i), 60, 3, 2, 2,
                                          readout));
  val.push_back(
      test::learnable_trial(gen, "lv", "vs", 40, 3, 2, 2, readout));

  Rng rng(37);
  Model model(tiny_net());
  model.init(rng);
  TrainerConfig cfg = tiny_trainer();
  cfg.lr = 5e-3;
  cfg.min_lr = 5e-4;
  cfg.max_epochs = 30;
  cfg.patience = 5;
  cfg.early_stop = 30;
  cfg.freeze_at_start = false;
  cfg.window = WindowSpec{24, 16};
  Trainer trainer(model, cfg);
  const FitResult res = trainer.fit(train, val);
  CHECK(res.best_val_ccc > res.history.front().val_ccc);
  CHECK(res.best_val_ccc > 0.3);
}

TEST_CASE("history files carry one row per epoch") {
  test::TempDir tmp;
  std::vector<EpochRecord> hist(2);
  hist[0] = {1, 1e-3, 0, 0, 0.25, 0.125, "none"};
  hist[1] = {2, 1e-4, 1, 1, 0.5, 0.0625, "reduce_lr"};
  const std::string path = tmp.file("history.csv");
  write_history_csv(path, hist);
  const std::string text = test::slurp(path);
  CHECK(text.rfind(
            "epoch,lr,plateau_counter,stagnation_counter,train_ccc,val_ccc,action",
            0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  CHECK(text.find("\n1,0.001,0,0,0.25,0.125,none\n") != std::string::npos);
  CHECK(text.find("reduce_lr") != std::string::npos);
}

TEST_CASE("trainer configs are validated") {
  TrainerConfig cfg = tiny_trainer();
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_trainer();
  cfg.min_lr = cfg.lr * 10;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_trainer();
  cfg.lr_factor = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_trainer();
  cfg.window.hop = cfg.window.length + 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_NOTHROW(tiny_trainer().validate());
}

}  // TEST_SUITE
