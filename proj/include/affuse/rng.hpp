#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace affuse {

// Deterministic random source. One Rng per concern (init, shuffling, dropout)
// keeps draw order independent of unrelated code paths; mix() derives stream
// seeds from a base seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return unit_(engine_); }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * unit_(engine_);
  }

  double normal(double mean, double stddev) {
    return mean + stddev * normal_(engine_);
  }

  std::uint64_t next_u64() { return engine_(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), engine_);
  }

  // splitmix64 of seed + stream index; distinct streams stay uncorrelated.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace affuse
