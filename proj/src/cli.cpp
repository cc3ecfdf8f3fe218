#include "affuse/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "affuse/data.hpp"
#include "affuse/metrics.hpp"
#include "affuse/rng.hpp"

namespace affuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(std::string(what) + ": cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string(what) + ": " + path + ": " + e.what());
  }
  return j;
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& ctx) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known) throw std::runtime_error(ctx + ": unknown key '" + item.key() + "'");
  }
}

std::string get_path(const json& j, const char* key, const fs::path& base,
                     std::string fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_string() || it->get<std::string>().empty())
    throw std::runtime_error(std::string("config: '") + key +
                             "' must be a non-empty string");
  fs::path p(it->get<std::string>());
  if (p.is_relative()) p = base / p;
  return p.string();
}

double get_number(const json& j, const char* key, double fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_number())
    throw std::runtime_error(std::string("config: '") + key + "' must be a number");
  return it->get<double>();
}

std::size_t get_count(const json& j, const char* key, std::size_t fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_number_unsigned())
    throw std::runtime_error(std::string("config: '") + key +
                             "' must be a non-negative integer");
  return it->get<std::size_t>();
}

bool get_flag(const json& j, const char* key, bool fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_boolean())
    throw std::runtime_error(std::string("config: '") + key + "' must be a boolean");
  return it->get<bool>();
}

std::string get_string(const json& j, const char* key, std::string fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_string() || it->get<std::string>().empty())
    throw std::runtime_error(std::string("config: '") + key +
                             "' must be a non-empty string");
  return it->get<std::string>();
}

void require(bool ok, const std::string& message) {
  if (!ok) throw std::runtime_error(message);
}

std::unordered_map<std::string, PreparedEntry> index_by_id(
    const std::vector<PreparedEntry>& entries) {
  std::unordered_map<std::string, PreparedEntry> out;
  for (const auto& e : entries) out.emplace(e.trial_id, e);
  return out;
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  const fs::path base = fs::path(path).parent_path();
  const json root = load_json_file(path, "config");
  if (!root.is_object())
    throw std::runtime_error("config: " + path + ": expected an object");
  reject_unknown_keys(root,
                      {"manifest", "prepared_dir", "folds_file", "dimension",
                       "model", "seed", "trainer", "window", "network"},
                      "config");

  RunConfig cfg;
  cfg.manifest = get_path(root, "manifest", base, "");
  cfg.prepared_dir = get_path(root, "prepared_dir", base, "");
  cfg.folds_file = get_path(root, "folds_file", base, "");
  cfg.dimension = get_string(root, "dimension", cfg.dimension);

  const std::string kind = get_string(root, "model", "multimodal");
  if (kind == "multimodal")
    cfg.model_kind = ModelKind::multimodal;
  else if (kind == "unimodal")
    cfg.model_kind = ModelKind::unimodal;
  else
    throw std::runtime_error("config: model must be 'unimodal' or 'multimodal'");

  cfg.seed = get_count(root, "seed", cfg.seed);

  if (const auto it = root.find("trainer"); it != root.end()) {
    const json& t = *it;
    if (!t.is_object()) throw std::runtime_error("config: 'trainer' must be an object");
    reject_unknown_keys(t,
                        {"batch_size", "lr", "min_lr", "patience", "lr_factor",
                         "early_stop", "max_epochs", "weight_decay",
                         "freeze_at_start"},
                        "config: trainer");
    cfg.trainer.batch_size = get_count(t, "batch_size", cfg.trainer.batch_size);
    cfg.trainer.lr = get_number(t, "lr", cfg.trainer.lr);
    cfg.trainer.min_lr = get_number(t, "min_lr", cfg.trainer.min_lr);
    cfg.trainer.patience = get_count(t, "patience", cfg.trainer.patience);
    cfg.trainer.lr_factor = get_number(t, "lr_factor", cfg.trainer.lr_factor);
    cfg.trainer.early_stop = get_count(t, "early_stop", cfg.trainer.early_stop);
    cfg.trainer.max_epochs = get_count(t, "max_epochs", cfg.trainer.max_epochs);
    cfg.trainer.weight_decay = get_number(t, "weight_decay", cfg.trainer.weight_decay);
    cfg.trainer.freeze_at_start =
        get_flag(t, "freeze_at_start", cfg.trainer.freeze_at_start);
  }

  if (const auto it = root.find("window"); it != root.end()) {
    const json& w = *it;
    if (!w.is_object()) throw std::runtime_error("config: 'window' must be an object");
    reject_unknown_keys(w, {"length", "hop"}, "config: window");
    cfg.trainer.window.length = get_count(w, "length", cfg.trainer.window.length);
    cfg.trainer.window.hop = get_count(w, "hop", cfg.trainer.window.hop);
  }

  if (const auto it = root.find("network"); it != root.end()) {
    const json& n = *it;
    if (!n.is_object()) throw std::runtime_error("config: 'network' must be an object");
    reject_unknown_keys(n,
                        {"visual_channels", "aural_channels", "levels",
                         "kernel_size", "dropout", "attention_dim"},
                        "config: network");
    cfg.network.visual_channels =
        get_count(n, "visual_channels", cfg.network.visual_channels);
    cfg.network.aural_channels =
        get_count(n, "aural_channels", cfg.network.aural_channels);
    cfg.network.levels = get_count(n, "levels", cfg.network.levels);
    cfg.network.kernel_size = get_count(n, "kernel_size", cfg.network.kernel_size);
    cfg.network.dropout = get_number(n, "dropout", cfg.network.dropout);
    cfg.network.attention_dim =
        get_count(n, "attention_dim", cfg.network.attention_dim);
  }

  cfg.trainer.seed = cfg.seed;
  cfg.trainer.validate();
  return cfg;
}

void cmd_prepare(const RunConfig& cfg) {
  require(!cfg.manifest.empty(), "prepare: config needs 'manifest'");
  require(!cfg.prepared_dir.empty(), "prepare: config needs 'prepared_dir'");
  const auto sources = read_manifest(cfg.manifest);
  require(!sources.empty(), "prepare: manifest lists no trials");

  // Every trial must carry the same modalities so folds can train together.
  std::vector<std::string> modalities;
  for (const auto& [name, ms] : sources.front().features) modalities.push_back(name);
  std::sort(modalities.begin(), modalities.end());
  for (const auto& src : sources) {
    std::vector<std::string> names;
    for (const auto& [name, ms] : src.features) names.push_back(name);
    std::sort(names.begin(), names.end());
    require(names == modalities,
            "prepare: trial " + src.trial_id + " has a different modality set");
  }

  struct Prepared {
    std::vector<std::vector<double>> label_rows;
    std::map<std::string, Tensor> features;  // paired rows, label clock
  };

  std::vector<Prepared> prepared(sources.size());
  std::map<std::string, std::size_t> widths;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& src = sources[i];
    const std::string ctx = "prepare: trial " + src.trial_id;

    const auto raw = read_label_csv(src.label.path);
    require(!raw.empty(), ctx + ": label file is empty");
    require(raw.front().size() == src.label_dimensions.size(),
            ctx + ": label file has " + std::to_string(raw.front().size()) +
                " columns, manifest declares " +
                std::to_string(src.label_dimensions.size()));
    const MaskedLabels masked = mask_invalid_rows(raw);
    require(!masked.kept.empty(), ctx + ": no valid label rows after masking");
    for (const auto& row : masked.values)
      for (double v : row)
        require(v >= -1.0 && v <= 1.0, ctx + ": label outside [-1, 1]");
    prepared[i].label_rows = masked.values;

    for (const auto& [name, ms] : src.features) {
      const FeatureSequence seq = read_afsq(ms.path);
      require(seq.rate_hz == ms.rate_hz,
              ctx + ": " + name + " rate differs from the manifest");
      const Tensor paired = pair_features_with_labels(
          seq.rows, ms.rate_hz, src.label.rate_hz, raw.size(), masked.kept);
      const auto [it, fresh] = widths.emplace(name, paired.shape()[1]);
      require(fresh || it->second == paired.shape()[1],
              ctx + ": " + name + " width differs across trials");
      prepared[i].features.emplace(name, paired);
    }
  }

  // Normalization moments come from the original training partition only.
  std::map<std::string, Moments> stats;
  for (const auto& name : modalities) {
    std::vector<const Tensor*> train_rows;
    for (std::size_t i = 0; i < sources.size(); ++i)
      if (sources[i].partition == "train")
        train_rows.push_back(&prepared[i].features.at(name));
    require(!train_rows.empty(), "prepare: no trials in the 'train' partition");
    stats.emplace(name, compute_moments(train_rows));
  }

  fs::create_directories(cfg.prepared_dir);
  std::vector<PreparedEntry> entries;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& src = sources[i];
    for (const auto& name : modalities) {
      const Tensor normalized =
          normalize_rows(prepared[i].features.at(name), stats.at(name));
      write_afsq(prepared_feature_path(cfg.prepared_dir, src.trial_id, name),
                 normalized, src.label.rate_hz);
    }
    write_label_csv(prepared_label_path(cfg.prepared_dir, src.trial_id),
                    prepared[i].label_rows);
    entries.push_back({src.trial_id, src.subject_id, src.partition,
                       prepared[i].label_rows.size(), modalities,
                       src.label_dimensions});
  }
  write_prepared_index(cfg.prepared_dir, entries);
  write_stats_json((fs::path(cfg.prepared_dir) / "stats.json").string(), stats);
  std::printf("prepared %zu trials (%zu modalities) into %s\n", entries.size(),
              modalities.size(), cfg.prepared_dir.c_str());
}

void cmd_folds(const RunConfig& cfg) {
  require(!cfg.manifest.empty(), "folds: config needs 'manifest'");
  require(!cfg.folds_file.empty(), "folds: config needs 'folds_file'");
  const auto sources = read_manifest(cfg.manifest);
  std::vector<TrialInfo> trials;
  trials.reserve(sources.size());
  for (const auto& src : sources)
    trials.push_back({src.trial_id, src.subject_id, src.partition});
  const auto folds = make_folds(trials, 6, cfg.seed);
  write_folds_json(cfg.folds_file, folds);
  std::printf("wrote %zu folds to %s\n", folds.size(), cfg.folds_file.c_str());
}

namespace {

std::vector<PreparedTrial> load_trials(const std::string& dir,
                                       const std::unordered_map<std::string, PreparedEntry>& by_id,
                                       const std::vector<std::string>& ids,
                                       const std::string& dimension,
                                       bool want_aural, const char* what) {
  std::vector<PreparedTrial> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end())
      throw std::runtime_error(std::string(what) + ": fold references unknown trial '" +
                               id + "'");
    out.push_back(load_prepared_trial(dir, it->second, dimension, want_aural));
  }
  return out;
}

}  // namespace

void cmd_train(const RunConfig& cfg, std::size_t fold,
               const std::string& dimension, const std::string& out_dir) {
  require(!cfg.prepared_dir.empty(), "train: config needs 'prepared_dir'");
  require(!cfg.folds_file.empty(), "train: config needs 'folds_file'");
  require(!out_dir.empty(), "train: an output directory is required");

  const auto entries = read_prepared_index(cfg.prepared_dir);
  const auto by_id = index_by_id(entries);
  const auto folds = read_folds_json(cfg.folds_file);
  require(fold < folds.size(),
          "train: fold " + std::to_string(fold) + " out of range (have " +
              std::to_string(folds.size()) + ")");

  const bool aural = cfg.model_kind == ModelKind::multimodal;
  const auto train_trials = load_trials(cfg.prepared_dir, by_id,
                                        folds[fold].train_ids, dimension, aural,
                                        "train");
  const auto val_trials = load_trials(cfg.prepared_dir, by_id,
                                      folds[fold].val_ids, dimension, aural,
                                      "train");
  require(!train_trials.empty(), "train: fold has no training trials");
  require(!val_trials.empty(), "train: fold has no validation trials");

  ModelConfig mc = cfg.network;
  mc.kind = cfg.model_kind;
  mc.visual_dim = train_trials.front().visual.shape()[0];
  if (aural) {
    mc.mfcc_dim = train_trials.front().mfcc.shape()[0];
    mc.vggish_dim = train_trials.front().vggish.shape()[0];
  }

  Model model(mc);
  Rng init_rng(Rng::mix(cfg.seed, 0));
  model.init(init_rng);

  Trainer trainer(model, cfg.trainer);
  const FitResult result = trainer.fit(train_trials, val_trials);

  const fs::path dir = fs::path(out_dir) / dimension / ("fold" + std::to_string(fold));
  fs::create_directories(dir);
  model.save((dir / "model.afmd").string());
  write_history_csv((dir / "history.csv").string(), result.history);
  std::printf("%s fold %zu: best val ccc %.6f at epoch %zu (%zu epochs)\n",
              dimension.c_str(), fold, result.best_val_ccc, result.best_epoch,
              result.history.size());
}

void cmd_predict(const RunConfig& cfg, const std::string& checkpoint,
                 const std::string& out_dir) {
  require(!cfg.prepared_dir.empty(), "predict: config needs 'prepared_dir'");
  require(!checkpoint.empty(), "predict: a checkpoint path is required");
  require(!out_dir.empty(), "predict: an output directory is required");

  const Model model = Model::load(checkpoint);
  const bool aural = model.config().kind == ModelKind::multimodal;
  const auto entries = read_prepared_index(cfg.prepared_dir);
  require(!entries.empty(), "predict: prepared index lists no trials");

  fs::create_directories(out_dir);
  for (const auto& entry : entries) {
    // any declared dimension selects the same feature files
    const PreparedTrial trial = load_prepared_trial(
        cfg.prepared_dir, entry, entry.dimensions.front(), aural);
    require(trial.visual.shape()[0] == model.config().visual_dim,
            "predict: trial " + entry.trial_id + " visual width " +
                std::to_string(trial.visual.shape()[0]) +
                " does not match the checkpoint");
    const auto trace = predict_trial(model, trial, cfg.trainer.window);
    write_trace_csv((fs::path(out_dir) / (entry.trial_id + ".csv")).string(), trace);
  }
  std::printf("wrote %zu traces to %s\n", entries.size(), out_dir.c_str());
}

void cmd_merge(const std::vector<std::string>& trace_dirs, MergePolicy policy,
               const std::string& out_dir) {
  require(!trace_dirs.empty(), "merge: at least one trace directory is required");
  require(!out_dir.empty(), "merge: an output directory is required");

  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(trace_dirs.front()))
    if (e.path().extension() == ".csv") names.insert(e.path().filename().string());
  require(!names.empty(), "merge: no trace files in " + trace_dirs.front());

  fs::create_directories(out_dir);
  for (const auto& name : names) {
    std::vector<std::vector<double>> traces;
    traces.reserve(trace_dirs.size());
    for (const auto& dir : trace_dirs)
      traces.push_back(read_trace_csv((fs::path(dir) / name).string()));
    write_trace_csv((fs::path(out_dir) / name).string(),
                    merge_traces(traces, policy));
  }
  std::printf("merged %zu trace sets (%s) into %s\n", names.size(),
              to_string(policy), out_dir.c_str());
}

void cmd_eval(const RunConfig& cfg, const std::string& traces_dir,
              const std::string& dimension, const std::string& out_file) {
  require(!cfg.prepared_dir.empty(), "eval: config needs 'prepared_dir'");
  require(!traces_dir.empty(), "eval: a traces directory is required");
  require(!out_file.empty(), "eval: an output file is required");

  const auto entries = read_prepared_index(cfg.prepared_dir);
  require(!entries.empty(), "eval: prepared index lists no trials");

  std::ofstream out(out_file);
  if (!out) throw std::runtime_error("eval: cannot open " + out_file);
  out << "trial_id,ccc\n";
  char buf[32];
  std::vector<double> all_pred;
  std::vector<double> all_ref;
  for (const auto& entry : entries) {
    const PreparedTrial trial =
        load_prepared_trial(cfg.prepared_dir, entry, dimension, false);
    const auto trace =
        read_trace_csv((fs::path(traces_dir) / (entry.trial_id + ".csv")).string());
    require(trace.size() == trial.labels.size(),
            "eval: trial " + entry.trial_id + " trace length " +
                std::to_string(trace.size()) + " does not match " +
                std::to_string(trial.labels.size()) + " labels");
    std::snprintf(buf, sizeof(buf), "%.17g", ccc(trace, trial.labels));
    out << entry.trial_id << ',' << buf << '\n';
    all_pred.insert(all_pred.end(), trace.begin(), trace.end());
    all_ref.insert(all_ref.end(), trial.labels.begin(), trial.labels.end());
  }
  const double overall = ccc(all_pred, all_ref);
  std::snprintf(buf, sizeof(buf), "%.17g", overall);
  out << "overall," << buf << '\n';
  out.flush();
  if (!out) throw std::runtime_error("eval: write failed: " + out_file);
  std::printf("%s overall ccc %.6f (%zu trials)\n", dimension.c_str(), overall,
              entries.size());
}

std::vector<std::string> train_dimensions(const RunConfig& cfg,
                                          const std::string& requested) {
  if (requested != "both")
    return {requested.empty() ? cfg.dimension : requested};
  require(!cfg.prepared_dir.empty(), "train: config needs 'prepared_dir'");
  const auto entries = read_prepared_index(cfg.prepared_dir);
  require(!entries.empty(), "train: prepared index lists no trials");
  std::vector<std::string> dims;
  for (const auto& d : entries.front().dimensions)
    if (std::find(dims.begin(), dims.end(), d) == dims.end()) dims.push_back(d);
  return dims;
}

}  // namespace affuse
