#include "affuse/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "affuse/binio.hpp"
#include "affuse/rng.hpp"

namespace affuse {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::size_t> align_indices(double label_rate, double feature_rate,
                                       std::size_t num_labels,
                                       std::size_t num_features) {
  if (!(label_rate > 0.0) || !(feature_rate > 0.0))
    throw std::invalid_argument("align_indices: rates must be positive");
  if (num_features == 0)
    throw std::invalid_argument("align_indices: no feature rows");
  const double ratio = feature_rate / label_rate;
  std::vector<std::size_t> out(num_labels);
  for (std::size_t i = 0; i < num_labels; ++i) {
    // round half up; clamping absorbs streams that end early
    const double nearest = std::floor(static_cast<double>(i) * ratio + 0.5);
    std::size_t idx = nearest <= 0.0 ? 0 : static_cast<std::size_t>(nearest);
    if (idx >= num_features) idx = num_features - 1;
    out[i] = idx;
  }
  return out;
}

MaskedLabels mask_invalid_rows(const std::vector<std::vector<double>>& raw,
                               double sentinel) {
  MaskedLabels out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto& row = raw[i];
    if (std::find(row.begin(), row.end(), sentinel) != row.end()) continue;
    out.kept.push_back(i);
    out.values.push_back(row);
  }
  return out;
}

Tensor pad_repeat_last(const Tensor& rows, std::size_t target_len) {
  if (rows.ndim() != 2)
    throw std::invalid_argument("pad_repeat_last: need a rows x dims matrix");
  const std::size_t t = rows.shape()[0];
  const std::size_t d = rows.shape()[1];
  if (target_len <= t) return rows;
  std::vector<double> v = rows.values();
  v.resize(target_len * d);
  for (std::size_t r = t; r < target_len; ++r)
    std::copy_n(v.begin() + (t - 1) * d, d, v.begin() + r * d);
  return Tensor({target_len, d}, std::move(v));
}

Tensor assemble_dense(const std::map<std::size_t, std::vector<double>>& present,
                      std::size_t num_rows, std::size_t dim) {
  Tensor out = Tensor::zeros({num_rows, dim});
  auto& v = out.values_mut();
  for (const auto& [idx, row] : present) {
    if (idx >= num_rows)
      throw std::invalid_argument("assemble_dense: row index out of range");
    if (row.size() != dim)
      throw std::invalid_argument("assemble_dense: row width mismatch");
    std::copy(row.begin(), row.end(), v.begin() + idx * dim);
  }
  return out;
}

std::vector<std::size_t> window_starts(std::size_t total, const WindowSpec& spec) {
  if (spec.length == 0 || spec.hop == 0 || spec.hop > spec.length)
    throw std::invalid_argument("window_starts: need 0 < hop <= length");
  if (total <= spec.length) return {0};
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + spec.length <= total; s += spec.hop)
    starts.push_back(s);
  if (starts.back() + spec.length < total)
    starts.push_back(total - spec.length);  // end-aligned remainder
  return starts;
}

Tensor pair_features_with_labels(const Tensor& rows, double feature_rate,
                                 double label_rate, std::size_t raw_label_count,
                                 const std::vector<std::size_t>& kept) {
  if (rows.ndim() != 2)
    throw std::invalid_argument("pair_features_with_labels: need a rows x dims matrix");
  if (!(feature_rate > 0.0) || !(label_rate > 0.0))
    throw std::invalid_argument("pair_features_with_labels: rates must be positive");
  if (kept.empty())
    throw std::invalid_argument("pair_features_with_labels: no retained labels");
  for (std::size_t k : kept)
    if (k >= raw_label_count)
      throw std::invalid_argument("pair_features_with_labels: kept index out of range");

  const std::size_t t = rows.shape()[0];
  const std::size_t d = rows.shape()[1];
  std::vector<double> out;
  out.reserve(kept.size() * d);
  if (feature_rate == label_rate) {
    // Same clock: the i-th row belongs to the i-th label; rows the extractor
    // never produced stay zero frames.
    const auto& src = rows.values();
    for (std::size_t k : kept) {
      if (k < t)
        out.insert(out.end(), src.begin() + k * d, src.begin() + (k + 1) * d);
      else
        out.insert(out.end(), d, 0.0);
    }
  } else {
    const double ratio = feature_rate / label_rate;
    const double span =
        std::floor(static_cast<double>(raw_label_count - 1) * ratio + 0.5) + 1.0;
    const std::size_t needed = static_cast<std::size_t>(span);
    const Tensor padded = pad_repeat_last(rows, std::max(t, needed));
    const auto idx = align_indices(label_rate, feature_rate, raw_label_count,
                                   padded.shape()[0]);
    const auto& src = padded.values();
    for (std::size_t k : kept) {
      const std::size_t r = idx[k];
      out.insert(out.end(), src.begin() + r * d, src.begin() + (r + 1) * d);
    }
  }
  return Tensor({kept.size(), d}, std::move(out));
}

std::vector<FoldSplit> make_folds(const std::vector<TrialInfo>& trials,
                                  std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("make_folds: need at least two folds");

  FoldSplit original;
  std::vector<std::string> subjects;  // first-appearance order
  std::unordered_map<std::string, std::size_t> trial_count;
  for (const auto& tr : trials) {
    if (tr.partition == "train") {
      original.train_ids.push_back(tr.trial_id);
      if (trial_count.find(tr.subject_id) == trial_count.end())
        subjects.push_back(tr.subject_id);
      ++trial_count[tr.subject_id];
    } else if (tr.partition == "val") {
      original.val_ids.push_back(tr.trial_id);
    } else {
      throw std::runtime_error("make_folds: unknown partition '" + tr.partition +
                               "' for trial " + tr.trial_id);
    }
  }
  if (original.train_ids.empty())
    throw std::runtime_error("make_folds: no training trials");

  const std::size_t groups_n = k - 1;
  if (subjects.size() < groups_n)
    throw std::runtime_error("make_folds: fewer training subjects than folds");

  // Greedy balance on trial count: shuffle for seed-dependent tie order, then
  // place heavy subjects first into the lightest group.
  Rng rng(seed);
  rng.shuffle(subjects);
  std::stable_sort(subjects.begin(), subjects.end(),
                   [&](const std::string& a, const std::string& b) {
                     return trial_count[a] > trial_count[b];
                   });
  std::vector<std::size_t> group_trials(groups_n, 0);
  std::vector<std::size_t> group_subjects(groups_n, 0);
  std::unordered_map<std::string, std::size_t> group_of;
  for (const auto& s : subjects) {
    std::size_t best = 0;
    for (std::size_t g = 1; g < groups_n; ++g) {
      if (group_trials[g] < group_trials[best] ||
          (group_trials[g] == group_trials[best] &&
           group_subjects[g] < group_subjects[best]))
        best = g;
    }
    group_of[s] = best;
    group_trials[best] += trial_count[s];
    group_subjects[best] += 1;
  }

  std::vector<FoldSplit> folds;
  folds.push_back(std::move(original));
  for (std::size_t g = 0; g < groups_n; ++g) {
    FoldSplit f;
    for (const auto& tr : trials) {
      if (tr.partition == "train" && group_of.at(tr.subject_id) == g)
        f.val_ids.push_back(tr.trial_id);
      else
        f.train_ids.push_back(tr.trial_id);
    }
    folds.push_back(std::move(f));
  }
  return folds;
}

Moments compute_moments(const std::vector<const Tensor*>& row_matrices) {
  if (row_matrices.empty())
    throw std::invalid_argument("compute_moments: no data");
  for (const Tensor* m : row_matrices)
    if (m == nullptr || m->ndim() != 2)
      throw std::invalid_argument("compute_moments: need rows x dims matrices");
  const std::size_t d = row_matrices[0]->shape()[1];
  std::size_t n = 0;
  for (const Tensor* m : row_matrices) {
    if (m->shape()[1] != d)
      throw std::invalid_argument("compute_moments: width mismatch");
    n += m->shape()[0];
  }

  Moments out;
  out.mean.assign(d, 0.0);
  out.stddev.assign(d, 0.0);
  for (const Tensor* m : row_matrices) {
    const auto& v = m->values();
    const std::size_t rows = m->shape()[0];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < d; ++c) out.mean[c] += v[r * d + c];
  }
  for (std::size_t c = 0; c < d; ++c) out.mean[c] /= static_cast<double>(n);
  for (const Tensor* m : row_matrices) {
    const auto& v = m->values();
    const std::size_t rows = m->shape()[0];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double dev = v[r * d + c] - out.mean[c];
        out.stddev[c] += dev * dev;
      }
  }
  for (std::size_t c = 0; c < d; ++c)
    out.stddev[c] = std::max(std::sqrt(out.stddev[c] / static_cast<double>(n)), 1e-8);
  return out;
}

Tensor normalize_rows(const Tensor& rows, const Moments& m) {
  if (rows.ndim() != 2)
    throw std::invalid_argument("normalize_rows: need a rows x dims matrix");
  const std::size_t t = rows.shape()[0];
  const std::size_t d = rows.shape()[1];
  if (m.mean.size() != d || m.stddev.size() != d)
    throw std::invalid_argument("normalize_rows: moments width mismatch");
  std::vector<double> v(t * d);
  const auto& src = rows.values();
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < d; ++c)
      v[r * d + c] = (src[r * d + c] - m.mean[c]) / m.stddev[c];
  return Tensor({t, d}, std::move(v));
}

// ---- AFSQ ----

void write_afsq(const std::string& path, const Tensor& rows, double rate_hz) {
  if (rows.ndim() != 2)
    throw std::invalid_argument("write_afsq: need a rows x dims matrix");
  if (!(rate_hz > 0.0))
    throw std::invalid_argument("write_afsq: rate must be positive");
  const long long mhz = std::llround(rate_hz * 1000.0);
  if (mhz <= 0 || mhz > 0xffffffffll)
    throw std::invalid_argument("write_afsq: rate out of range");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_afsq: cannot open " + path);
  binio::write_magic(out, "AFSQ");
  binio::write_u32(out, 1);
  binio::write_u32(out, static_cast<std::uint32_t>(rows.shape()[0]));
  binio::write_u32(out, static_cast<std::uint32_t>(rows.shape()[1]));
  binio::write_u32(out, static_cast<std::uint32_t>(mhz));
  for (double v : rows.values()) binio::write_f64(out, v);
  out.flush();
  if (!out) throw std::runtime_error("write_afsq: write failed: " + path);
}

FeatureSequence read_afsq(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_afsq: cannot open " + path);
  binio::expect_magic(in, "AFSQ", "read_afsq");
  const std::uint32_t version = binio::read_u32(in, "read_afsq");
  if (version != 1) throw std::runtime_error("read_afsq: unsupported version");
  const std::uint32_t t = binio::read_u32(in, "read_afsq");
  const std::uint32_t d = binio::read_u32(in, "read_afsq");
  const std::uint32_t mhz = binio::read_u32(in, "read_afsq");
  if (t == 0 || d == 0) throw std::runtime_error("read_afsq: empty sequence");
  if (mhz == 0) throw std::runtime_error("read_afsq: non-positive rate");
  std::vector<double> v(static_cast<std::size_t>(t) * d);
  for (double& x : v) x = binio::read_f64(in, "read_afsq");
  binio::expect_eof(in, "read_afsq");
  return FeatureSequence{Tensor({t, d}, std::move(v)),
                         static_cast<double>(mhz) / 1000.0};
}

// ---- CSV ----

namespace {

std::string location(const std::string& path, std::size_t lineno) {
  return path + ":" + std::to_string(lineno);
}

double parse_number(const std::string& field, const std::string& path,
                    std::size_t lineno) {
  const char* begin = field.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || end != begin + field.size())
    throw std::runtime_error("csv: bad number '" + field + "' at " +
                             location(path, lineno));
  return v;
}

std::vector<std::vector<double>> read_csv_rows(const std::string& path,
                                               const char* what) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(std::string(what) + ": cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      const std::string field = line.substr(pos, comma - pos);
      row.push_back(parse_number(field, path, lineno));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error(std::string(what) + ": ragged row at " +
                               location(path, lineno));
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_number(std::ofstream& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out << buf;
}

}  // namespace

std::vector<std::vector<double>> read_label_csv(const std::string& path) {
  return read_csv_rows(path, "read_label_csv");
}

void write_label_csv(const std::string& path,
                     const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_label_csv: cannot open " + path);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << ',';
      write_number(out, row[c]);
    }
    out << '\n';
  }
  out.flush();
  if (!out) throw std::runtime_error("write_label_csv: write failed: " + path);
}

void write_value_csv(const std::string& path, const std::vector<double>& values) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_value_csv: cannot open " + path);
  for (double v : values) {
    write_number(out, v);
    out << '\n';
  }
  out.flush();
  if (!out) throw std::runtime_error("write_value_csv: write failed: " + path);
}

std::vector<double> read_value_csv(const std::string& path) {
  const auto rows = read_csv_rows(path, "read_value_csv");
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& row : rows) {
    if (row.size() != 1)
      throw std::runtime_error("read_value_csv: expected one column in " + path);
    out.push_back(row[0]);
  }
  return out;
}

void write_trace_csv(const std::string& path, const std::vector<double>& values) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_trace_csv: cannot open " + path);
  out << "frame_index,value\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    out << i << ',';
    write_number(out, values[i]);
    out << '\n';
  }
  out.flush();
  if (!out) throw std::runtime_error("write_trace_csv: write failed: " + path);
}

std::vector<double> read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_trace_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("read_trace_csv: empty file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "frame_index,value")
    throw std::runtime_error("read_trace_csv: missing header: " + path);

  std::vector<double> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error("read_trace_csv: missing value at " +
                               location(path, lineno));
    const double idx = parse_number(line.substr(0, comma), path, lineno);
    if (idx != static_cast<double>(out.size()))
      throw std::runtime_error("read_trace_csv: frame index gap at " +
                               location(path, lineno));
    out.push_back(parse_number(line.substr(comma + 1), path, lineno));
  }
  return out;
}

// ---- JSON documents ----

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

void store_json_file(const std::string& path, const json& j, const char* what) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(std::string(what) + ": cannot open " + path);
  out << j.dump(2) << '\n';
  out.flush();
  if (!out) throw std::runtime_error(std::string(what) + ": write failed: " + path);
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
    if (!known)
      throw std::runtime_error(ctx + ": unknown key '" + item.key() + "'");
  }
}

const json& need_member(const json& j, const char* key, const std::string& ctx) {
  const auto it = j.find(key);
  if (it == j.end()) throw std::runtime_error(ctx + ": missing '" + key + "'");
  return *it;
}

std::string need_string(const json& j, const char* key, const std::string& ctx) {
  const json& v = need_member(j, key, ctx);
  if (!v.is_string() || v.get<std::string>().empty())
    throw std::runtime_error(ctx + ": '" + key + "' must be a non-empty string");
  return v.get<std::string>();
}

double need_rate(const json& j, const char* key, const std::string& ctx) {
  const json& v = need_member(j, key, ctx);
  if (!v.is_number() || !(v.get<double>() > 0.0))
    throw std::runtime_error(ctx + ": '" + key + "' must be a positive number");
  return v.get<double>();
}

// Trial ids name files in the prepared directory.
void check_file_safe(const std::string& id, const std::string& ctx) {
  if (id.empty() || id == "." || id == ".." ||
      id.find('/') != std::string::npos || id.find('\\') != std::string::npos)
    throw std::runtime_error(ctx + ": trial id '" + id + "' is not a safe file name");
}

std::string resolve_path(const std::string& raw, const fs::path& base) {
  fs::path p(raw);
  if (p.is_relative()) p = base / p;
  return p.string();
}

std::vector<std::string> string_array(const json& v, const std::string& ctx) {
  if (!v.is_array())
    throw std::runtime_error(ctx + ": expected an array of strings");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string() || e.get<std::string>().empty())
      throw std::runtime_error(ctx + ": expected non-empty strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

}  // namespace

std::vector<TrialSource> read_manifest(const std::string& path) {
  const fs::path base = fs::path(path).parent_path();
  const json root = load_json_file(path, "read_manifest");
  if (!root.is_object())
    throw std::runtime_error("read_manifest: " + path + ": expected an object");
  reject_unknown_keys(root, {"trials"}, "read_manifest");
  const json& trials = need_member(root, "trials", "read_manifest");
  if (!trials.is_array())
    throw std::runtime_error("read_manifest: 'trials' must be an array");

  std::vector<TrialSource> out;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const json& t = trials[i];
    const std::string ctx = "read_manifest: trial " + std::to_string(i);
    if (!t.is_object()) throw std::runtime_error(ctx + ": expected an object");
    reject_unknown_keys(
        t, {"trial_id", "subject_id", "partition", "labels", "features"}, ctx);

    TrialSource src;
    src.trial_id = need_string(t, "trial_id", ctx);
    check_file_safe(src.trial_id, ctx);
    if (!seen.insert(src.trial_id).second)
      throw std::runtime_error(ctx + ": duplicate trial id '" + src.trial_id + "'");
    src.subject_id = need_string(t, "subject_id", ctx);
    src.partition = need_string(t, "partition", ctx);
    if (src.partition != "train" && src.partition != "val")
      throw std::runtime_error(ctx + ": partition must be 'train' or 'val'");

    const json& labels = need_member(t, "labels", ctx);
    if (!labels.is_object()) throw std::runtime_error(ctx + ": 'labels' must be an object");
    reject_unknown_keys(labels, {"path", "rate_hz", "dimensions"}, ctx + ": labels");
    src.label.path = resolve_path(need_string(labels, "path", ctx + ": labels"), base);
    src.label.rate_hz = need_rate(labels, "rate_hz", ctx + ": labels");
    src.label_dimensions =
        string_array(need_member(labels, "dimensions", ctx + ": labels"),
                     ctx + ": labels.dimensions");
    if (src.label_dimensions.empty())
      throw std::runtime_error(ctx + ": labels.dimensions must not be empty");
    std::unordered_set<std::string> dims(src.label_dimensions.begin(),
                                         src.label_dimensions.end());
    if (dims.size() != src.label_dimensions.size())
      throw std::runtime_error(ctx + ": duplicate label dimension");

    const json& feats = need_member(t, "features", ctx);
    if (!feats.is_object() || feats.empty())
      throw std::runtime_error(ctx + ": 'features' must be a non-empty object");
    for (const auto& item : feats.items()) {
      const std::string fctx = ctx + ": features." + item.key();
      if (!item.value().is_object())
        throw std::runtime_error(fctx + ": expected an object");
      reject_unknown_keys(item.value(), {"path", "rate_hz"}, fctx);
      ModalitySource ms;
      ms.path = resolve_path(need_string(item.value(), "path", fctx), base);
      ms.rate_hz = need_rate(item.value(), "rate_hz", fctx);
      src.features.emplace(item.key(), std::move(ms));
    }
    out.push_back(std::move(src));
  }
  return out;
}

void write_folds_json(const std::string& path, const std::vector<FoldSplit>& folds) {
  json arr = json::array();
  for (std::size_t i = 0; i < folds.size(); ++i)
    arr.push_back(json{{"fold", i},
                       {"train", folds[i].train_ids},
                       {"val", folds[i].val_ids}});
  store_json_file(path, json{{"folds", arr}}, "write_folds_json");
}

std::vector<FoldSplit> read_folds_json(const std::string& path) {
  const json root = load_json_file(path, "read_folds_json");
  if (!root.is_object())
    throw std::runtime_error("read_folds_json: " + path + ": expected an object");
  reject_unknown_keys(root, {"folds"}, "read_folds_json");
  const json& arr = need_member(root, "folds", "read_folds_json");
  if (!arr.is_array())
    throw std::runtime_error("read_folds_json: 'folds' must be an array");
  std::vector<FoldSplit> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string ctx = "read_folds_json: fold " + std::to_string(i);
    const json& f = arr[i];
    if (!f.is_object()) throw std::runtime_error(ctx + ": expected an object");
    reject_unknown_keys(f, {"fold", "train", "val"}, ctx);
    const json& id = need_member(f, "fold", ctx);
    if (!id.is_number_unsigned() || id.get<std::size_t>() != i)
      throw std::runtime_error(ctx + ": fold ids must be 0..k-1 in order");
    FoldSplit split;
    split.train_ids = string_array(need_member(f, "train", ctx), ctx + ": train");
    split.val_ids = string_array(need_member(f, "val", ctx), ctx + ": val");
    out.push_back(std::move(split));
  }
  return out;
}

void write_stats_json(const std::string& path,
                      const std::map<std::string, Moments>& per_modality) {
  json mods = json::object();
  for (const auto& [name, m] : per_modality)
    mods[name] = json{{"mean", m.mean}, {"stddev", m.stddev}};
  store_json_file(path, json{{"modalities", mods}}, "write_stats_json");
}

std::map<std::string, Moments> read_stats_json(const std::string& path) {
  const json root = load_json_file(path, "read_stats_json");
  if (!root.is_object())
    throw std::runtime_error("read_stats_json: " + path + ": expected an object");
  reject_unknown_keys(root, {"modalities"}, "read_stats_json");
  const json& mods = need_member(root, "modalities", "read_stats_json");
  if (!mods.is_object())
    throw std::runtime_error("read_stats_json: 'modalities' must be an object");
  std::map<std::string, Moments> out;
  for (const auto& item : mods.items()) {
    const std::string ctx = "read_stats_json: " + item.key();
    if (!item.value().is_object()) throw std::runtime_error(ctx + ": expected an object");
    reject_unknown_keys(item.value(), {"mean", "stddev"}, ctx);
    Moments m;
    const json& mean = need_member(item.value(), "mean", ctx);
    const json& stddev = need_member(item.value(), "stddev", ctx);
    if (!mean.is_array() || !stddev.is_array() || mean.size() != stddev.size())
      throw std::runtime_error(ctx + ": mean/stddev must be equal-length arrays");
    for (const auto& v : mean) {
      if (!v.is_number()) throw std::runtime_error(ctx + ": mean must be numeric");
      m.mean.push_back(v.get<double>());
    }
    for (const auto& v : stddev) {
      if (!v.is_number()) throw std::runtime_error(ctx + ": stddev must be numeric");
      m.stddev.push_back(v.get<double>());
    }
    out.emplace(item.key(), std::move(m));
  }
  return out;
}

std::string prepared_feature_path(const std::string& dir, const std::string& trial_id,
                                  const std::string& modality) {
  return (fs::path(dir) / (trial_id + "." + modality + ".afsq")).string();
}

std::string prepared_label_path(const std::string& dir, const std::string& trial_id) {
  return (fs::path(dir) / (trial_id + ".labels.csv")).string();
}

void write_prepared_index(const std::string& dir,
                          const std::vector<PreparedEntry>& entries) {
  json arr = json::array();
  for (const auto& e : entries)
    arr.push_back(json{{"trial_id", e.trial_id},
                       {"subject_id", e.subject_id},
                       {"partition", e.partition},
                       {"frames", e.frames},
                       {"modalities", e.modalities},
                       {"dimensions", e.dimensions}});
  store_json_file((fs::path(dir) / "index.json").string(), json{{"trials", arr}},
                  "write_prepared_index");
}

std::vector<PreparedEntry> read_prepared_index(const std::string& dir) {
  const std::string path = (fs::path(dir) / "index.json").string();
  const json root = load_json_file(path, "read_prepared_index");
  if (!root.is_object())
    throw std::runtime_error("read_prepared_index: " + path + ": expected an object");
  reject_unknown_keys(root, {"trials"}, "read_prepared_index");
  const json& arr = need_member(root, "trials", "read_prepared_index");
  if (!arr.is_array())
    throw std::runtime_error("read_prepared_index: 'trials' must be an array");
  std::vector<PreparedEntry> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string ctx = "read_prepared_index: trial " + std::to_string(i);
    const json& t = arr[i];
    if (!t.is_object()) throw std::runtime_error(ctx + ": expected an object");
    reject_unknown_keys(
        t, {"trial_id", "subject_id", "partition", "frames", "modalities", "dimensions"},
        ctx);
    PreparedEntry e;
    e.trial_id = need_string(t, "trial_id", ctx);
    check_file_safe(e.trial_id, ctx);
    e.subject_id = need_string(t, "subject_id", ctx);
    e.partition = need_string(t, "partition", ctx);
    const json& frames = need_member(t, "frames", ctx);
    if (!frames.is_number_unsigned() || frames.get<std::size_t>() == 0)
      throw std::runtime_error(ctx + ": 'frames' must be a positive integer");
    e.frames = frames.get<std::size_t>();
    e.modalities = string_array(need_member(t, "modalities", ctx), ctx + ": modalities");
    e.dimensions = string_array(need_member(t, "dimensions", ctx), ctx + ": dimensions");
    out.push_back(std::move(e));
  }
  return out;
}

PreparedTrial load_prepared_trial(const std::string& dir, const PreparedEntry& entry,
                                  const std::string& dimension, bool want_aural) {
  const std::string ctx = "load_prepared_trial: trial " + entry.trial_id;
  const auto dim_it =
      std::find(entry.dimensions.begin(), entry.dimensions.end(), dimension);
  if (dim_it == entry.dimensions.end())
    throw std::runtime_error(ctx + ": no dimension '" + dimension + "'");
  const std::size_t col =
      static_cast<std::size_t>(dim_it - entry.dimensions.begin());

  const auto label_rows = read_label_csv(prepared_label_path(dir, entry.trial_id));
  if (label_rows.size() != entry.frames)
    throw std::runtime_error(ctx + ": label count mismatch");
  PreparedTrial out;
  out.trial_id = entry.trial_id;
  out.subject_id = entry.subject_id;
  out.partition = entry.partition;
  out.labels.reserve(entry.frames);
  for (const auto& row : label_rows) {
    if (row.size() != entry.dimensions.size())
      throw std::runtime_error(ctx + ": label width mismatch");
    out.labels.push_back(row[col]);
  }

  const auto load = [&](const char* modality) {
    if (std::find(entry.modalities.begin(), entry.modalities.end(), modality) ==
        entry.modalities.end())
      throw std::runtime_error(ctx + ": missing modality '" + modality + "'");
    FeatureSequence fs_ = read_afsq(prepared_feature_path(dir, entry.trial_id, modality));
    if (fs_.rows.shape()[0] != entry.frames)
      throw std::runtime_error(ctx + ": feature length mismatch for '" +
                               std::string(modality) + "'");
    return transpose(fs_.rows);  // training wants channels x frames
  };
  out.visual = load("visual");
  if (want_aural) {
    out.mfcc = load("mfcc");
    out.vggish = load("vggish");
  }
  return out;
}

}  // namespace affuse
