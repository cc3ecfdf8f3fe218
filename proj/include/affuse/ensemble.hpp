#pragma once

#include <string>
#include <vector>

// Merging of per-fold prediction traces: clip to the label range and combine
// aligned traces by CCC-weighted mean centering, in either order.

namespace affuse {

// Values outside [-1, 1] saturate; idempotent.
std::vector<double> clip_trace(std::vector<double> trace);

// Weighted merge of K aligned traces. Each trace is weighted by its CCC
// against the mean of the others (floored at 1e-3 so an anti-correlated fold
// cannot flip signs), every trace is re-centered on the weighted grand mean,
// and the weighted average of the centered traces is returned. K=1 passes
// through.
std::vector<double> ccc_center(const std::vector<std::vector<double>>& traces);

enum class MergePolicy {
  early_clip,  // clip each fold, center, clip the result
  late_clip,   // center, then clip
};

MergePolicy merge_policy_from_string(const std::string& name);
const char* to_string(MergePolicy policy);

std::vector<double> merge_traces(const std::vector<std::vector<double>>& traces,
                                 MergePolicy policy);

}  // namespace affuse
