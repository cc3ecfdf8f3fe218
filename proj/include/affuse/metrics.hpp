#pragma once

#include <vector>

#include "affuse/tensor.hpp"

namespace affuse {

// Concordance correlation 2*cov / (var_x + var_y + (mean_x - mean_y)^2) with
// biased (divide by N) moments. Conventions for degenerate input: both
// sequences constant with equal means -> 1; zero covariance over a positive
// denominator -> 0. Throws on length mismatch or fewer than two samples.
double ccc(const std::vector<double>& x, const std::vector<double>& y);

// Pearson correlation; 0 when either variance vanishes.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

// Differentiable 1 - ccc(pred, target) built from tape primitives. The
// degenerate conventions above are not reachable here: a zero denominator
// would divide by zero and surface as the tape's finiteness error.
Tensor ccc_loss(Graph& g, const Tensor& pred, const Tensor& target);

}  // namespace affuse
