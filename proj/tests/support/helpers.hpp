#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "affuse/data.hpp"
#include "affuse/rng.hpp"
#include "affuse/tensor.hpp"

// Shared scaffolding for the test binaries. Everything throws rather than
// asserting so the same helpers serve doctest suites and the plain acceptance
// runner.

namespace affuse::test {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl =
        (std::filesystem::temp_directory_path() / "affuse_test_XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const {
    return (std::filesystem::path(path_) / name).string();
  }

 private:
  std::string path_;
};

inline std::vector<double> rand_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-scale, scale);
  return v;
}

inline Tensor rand_tensor(Rng& rng, std::vector<std::size_t> shape,
                          double scale = 1.0, bool requires_grad = false) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return Tensor(std::move(shape), rand_vec(rng, n, scale), requires_grad);
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

// Runs f and returns true when it throws an exception whose message contains
// needle.
template <class F>
bool throws_containing(F&& f, const std::string& needle) {
  try {
    f();
  } catch (const std::exception& e) {
    return std::string(e.what()).find(needle) != std::string::npos;
  }
  return false;
}

// A training-ready trial with uniform random features and labels.
inline PreparedTrial random_trial(Rng& rng, const std::string& id,
                                  const std::string& subject, std::size_t frames,
                                  std::size_t visual_dim, std::size_t mfcc_dim,
                                  std::size_t vggish_dim) {
  PreparedTrial t;
  t.trial_id = id;
  t.subject_id = subject;
  t.partition = "train";
  t.visual = rand_tensor(rng, {visual_dim, frames});
  if (mfcc_dim > 0) t.mfcc = rand_tensor(rng, {mfcc_dim, frames});
  if (vggish_dim > 0) t.vggish = rand_tensor(rng, {vggish_dim, frames});
  t.labels.resize(frames);
  for (double& v : t.labels) v = rng.uniform(-0.9, 0.9);
  return t;
}

// A trial whose labels are a smooth causal function of its own feature
// streams: a fixed linear readout of all channels, exponentially smoothed
// over time, squashed into (-1, 1). Low-frequency and fully predictable from
// a short history, so a small network can fit it tightly.
inline PreparedTrial learnable_trial(Rng& rng, const std::string& id,
                                     const std::string& subject,
                                     std::size_t frames, std::size_t visual_dim,
                                     std::size_t mfcc_dim, std::size_t vggish_dim,
                                     const std::vector<double>& readout) {
  PreparedTrial t = random_trial(rng, id, subject, frames, visual_dim, mfcc_dim,
                                 vggish_dim);
  const std::size_t total = visual_dim + mfcc_dim + vggish_dim;
  if (readout.size() != total)
    throw std::invalid_argument("learnable_trial: readout width mismatch");
  double state = 0.0;
  for (std::size_t f = 0; f < frames; ++f) {
    double z = 0.0;
    std::size_t c = 0;
    for (std::size_t d = 0; d < visual_dim; ++d) z += readout[c++] * t.visual.at(d, f);
    for (std::size_t d = 0; d < mfcc_dim; ++d) z += readout[c++] * t.mfcc.at(d, f);
    for (std::size_t d = 0; d < vggish_dim; ++d) z += readout[c++] * t.vggish.at(d, f);
    state = 0.75 * state + 0.25 * z;
    t.labels[f] = std::tanh(1.5 * state);
  }
  return t;
}

}  // namespace affuse::test
