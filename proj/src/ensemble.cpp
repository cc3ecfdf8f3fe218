#include "affuse/ensemble.hpp"

#include <algorithm>
#include <stdexcept>

#include "affuse/metrics.hpp"

namespace affuse {

std::vector<double> clip_trace(std::vector<double> trace) {
  for (double& v : trace) v = std::clamp(v, -1.0, 1.0);
  return trace;
}

std::vector<double> ccc_center(const std::vector<std::vector<double>>& traces) {
  if (traces.empty()) throw std::invalid_argument("ccc_center: no traces");
  const std::size_t n = traces.front().size();
  for (const auto& t : traces)
    if (t.size() != n) throw std::invalid_argument("ccc_center: length mismatch");
  if (traces.size() == 1) return traces.front();

  const std::size_t k = traces.size();
  constexpr double kWeightFloor = 1e-3;

  std::vector<double> weights(k);
  std::vector<double> others(n);
  for (std::size_t i = 0; i < k; ++i) {
    std::fill(others.begin(), others.end(), 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i) continue;
      for (std::size_t f = 0; f < n; ++f) others[f] += traces[j][f];
    }
    for (double& v : others) v /= static_cast<double>(k - 1);
    weights[i] = std::max(ccc(traces[i], others), kWeightFloor);
  }

  double weight_sum = 0.0;
  for (double w : weights) weight_sum += w;

  std::vector<double> means(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (double v : traces[i]) means[i] += v;
    means[i] /= static_cast<double>(n);
  }
  double grand_mean = 0.0;
  for (std::size_t i = 0; i < k; ++i) grand_mean += weights[i] * means[i];
  grand_mean /= weight_sum;

  std::vector<double> merged(n, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const double shift = grand_mean - means[i];
    for (std::size_t f = 0; f < n; ++f)
      merged[f] += weights[i] * (traces[i][f] + shift);
  }
  for (double& v : merged) v /= weight_sum;
  return merged;
}

MergePolicy merge_policy_from_string(const std::string& name) {
  if (name == "early") return MergePolicy::early_clip;
  if (name == "late") return MergePolicy::late_clip;
  throw std::invalid_argument("merge policy must be 'early' or 'late', got '" +
                              name + "'");
}

const char* to_string(MergePolicy policy) {
  return policy == MergePolicy::early_clip ? "early" : "late";
}

std::vector<double> merge_traces(const std::vector<std::vector<double>>& traces,
                                 MergePolicy policy) {
  if (policy == MergePolicy::early_clip) {
    std::vector<std::vector<double>> clipped;
    clipped.reserve(traces.size());
    for (const auto& t : traces) clipped.push_back(clip_trace(t));
    return clip_trace(ccc_center(clipped));
  }
  return clip_trace(ccc_center(traces));
}

}  // namespace affuse
