#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "affuse/tensor.hpp"

// Dataset plumbing: rate alignment, sentinel masking, padding, windowing,
// subject-disjoint folds, normalization, and the on-disk formats (AFSQ
// feature containers, label CSVs, JSON manifests).

namespace affuse {

// Nearest feature row for each label tick, round half up, clamped to the last
// row. Rates are in Hz; the result is non-decreasing.
std::vector<std::size_t> align_indices(double label_rate, double feature_rate,
                                       std::size_t num_labels,
                                       std::size_t num_features);

struct MaskedLabels {
  std::vector<std::size_t> kept;              // original row indices, ascending
  std::vector<std::vector<double>> values;    // kept rows, all columns
};

// Drops every row containing the sentinel (exact match in any column).
MaskedLabels mask_invalid_rows(const std::vector<std::vector<double>>& raw,
                               double sentinel = -5.0);

// Extends rows (t x d) to target_len rows by repeating the last row; returns
// the input unchanged when it is already long enough.
Tensor pad_repeat_last(const Tensor& rows, std::size_t target_len);

// Dense (num_rows x dim) matrix, zero rows where `present` has no entry.
Tensor assemble_dense(const std::map<std::size_t, std::vector<double>>& present,
                      std::size_t num_rows, std::size_t dim);

struct WindowSpec {
  std::size_t length = 300;
  std::size_t hop = 200;
};

// Window start offsets covering [0, total): hop-strided full windows plus an
// end-aligned final window when frames would be left over. total < length
// yields the single zero-padded window {0}.
std::vector<std::size_t> window_starts(std::size_t total, const WindowSpec& spec);

// One feature row per retained label row. At equal rates short streams are
// zero-filled at the tail (dense assembly); at differing rates the stream is
// repeat-padded and sampled at the nearest-index alignment.
Tensor pair_features_with_labels(const Tensor& rows, double feature_rate,
                                 double label_rate, std::size_t raw_label_count,
                                 const std::vector<std::size_t>& kept);

struct TrialInfo {
  std::string trial_id;
  std::string subject_id;
  std::string partition;  // "train" or "val"
};

struct FoldSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
};

// k splits: fold 0 is the given partition; the given training subjects are
// shuffled (seeded), greedily balanced by trial count into k-1 groups, and
// fold i validates on group i-1 while training on everything else plus the
// original validation trials. Subjects never straddle a split.
std::vector<FoldSplit> make_folds(const std::vector<TrialInfo>& trials,
                                  std::size_t k, std::uint64_t seed);

struct Moments {
  std::vector<double> mean;
  std::vector<double> stddev;  // floored at 1e-8
};

// Per-column biased moments over the concatenated rows of the given matrices.
Moments compute_moments(const std::vector<const Tensor*>& row_matrices);

// (x - mean) / stddev per column.
Tensor normalize_rows(const Tensor& rows, const Moments& m);

void write_stats_json(const std::string& path,
                      const std::map<std::string, Moments>& per_modality);
std::map<std::string, Moments> read_stats_json(const std::string& path);

// ---- AFSQ feature container ----

struct FeatureSequence {
  Tensor rows;  // t x d
  double rate_hz = 0.0;
};

void write_afsq(const std::string& path, const Tensor& rows, double rate_hz);
FeatureSequence read_afsq(const std::string& path);

// ---- label CSV (comma-separated columns, one row per line) ----

std::vector<std::vector<double>> read_label_csv(const std::string& path);
void write_label_csv(const std::string& path,
                     const std::vector<std::vector<double>>& rows);
void write_value_csv(const std::string& path, const std::vector<double>& values);
std::vector<double> read_value_csv(const std::string& path);

// ---- prediction trace CSV (frame_index,value with header) ----

void write_trace_csv(const std::string& path, const std::vector<double>& values);
std::vector<double> read_trace_csv(const std::string& path);

// ---- manifest ----

struct ModalitySource {
  std::string path;  // resolved against the manifest directory
  double rate_hz = 0.0;
};

struct TrialSource {
  std::string trial_id;
  std::string subject_id;
  std::string partition;  // "train" or "val"
  ModalitySource label;
  std::vector<std::string> label_dimensions;       // names of the CSV columns
  std::map<std::string, ModalitySource> features;  // keyed by modality name
};

std::vector<TrialSource> read_manifest(const std::string& path);

// ---- fold file ----

void write_folds_json(const std::string& path, const std::vector<FoldSplit>& folds);
std::vector<FoldSplit> read_folds_json(const std::string& path);

// ---- prepared directory ----

struct PreparedEntry {
  std::string trial_id;
  std::string subject_id;
  std::string partition;
  std::size_t frames = 0;
  std::vector<std::string> modalities;  // sorted
  std::vector<std::string> dimensions;  // emotion dimensions present
};

void write_prepared_index(const std::string& dir,
                          const std::vector<PreparedEntry>& entries);
std::vector<PreparedEntry> read_prepared_index(const std::string& dir);

std::string prepared_feature_path(const std::string& dir, const std::string& trial_id,
                                  const std::string& modality);
std::string prepared_label_path(const std::string& dir, const std::string& trial_id);

// One trial ready for training: channel-major features, one label dimension.
struct PreparedTrial {
  std::string trial_id;
  std::string subject_id;
  std::string partition;
  Tensor visual;  // dim x frames
  Tensor mfcc;
  Tensor vggish;
  std::vector<double> labels;
};

PreparedTrial load_prepared_trial(const std::string& dir, const PreparedEntry& entry,
                                  const std::string& dimension, bool want_aural);

}  // namespace affuse
