#pragma once

#include <functional>
#include <string>
#include <vector>

#include "affuse/tensor.hpp"

namespace affuse {

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checked = 0;  // parameter elements compared
  bool pass = false;
};

// Compares one reverse pass against central finite differences. build_loss
// must rebuild the scalar loss from scratch on the given graph; params are
// the leaves to perturb (every element is checked). The error for element i
// is |g_i - fd_i| / max(1, |g_i|, |fd_i|), so tiny gradients are judged on
// absolute error while large ones are judged relatively.
GradCheckReport check_gradients(const std::string& name,
                                const std::vector<Tensor>& params,
                                const std::function<Tensor(Graph&)>& build_loss,
                                double step = 1e-5, double tolerance = 1e-6);

// The standard battery (each block plus reduced-width whole models); prints
// one line per entry to stdout when verbose. Returns false if any entry
// fails.
bool run_gradcheck_battery(bool verbose);

}  // namespace affuse
