#include "affuse/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace affuse {

namespace {

struct PairedMoments {
  double mean_x = 0.0;
  double mean_y = 0.0;
  double var_x = 0.0;
  double var_y = 0.0;
  double cov = 0.0;
};

PairedMoments paired_moments(const std::vector<double>& x,
                             const std::vector<double>& y, const char* what) {
  if (x.size() != y.size())
    throw std::invalid_argument(std::string(what) + ": length mismatch");
  if (x.size() < 2)
    throw std::invalid_argument(std::string(what) + ": needs at least 2 samples");
  const double n = static_cast<double>(x.size());
  PairedMoments m;
  for (std::size_t i = 0; i < x.size(); ++i) {
    m.mean_x += x[i];
    m.mean_y += y[i];
  }
  m.mean_x /= n;
  m.mean_y /= n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - m.mean_x;
    const double dy = y[i] - m.mean_y;
    m.var_x += dx * dx;
    m.var_y += dy * dy;
    m.cov += dx * dy;
  }
  m.var_x /= n;
  m.var_y /= n;
  m.cov /= n;
  return m;
}

}  // namespace

double ccc(const std::vector<double>& x, const std::vector<double>& y) {
  const PairedMoments m = paired_moments(x, y, "ccc");
  const double dmu = m.mean_x - m.mean_y;
  const double denom = m.var_x + m.var_y + dmu * dmu;
  if (denom == 0.0) return 1.0;  // both constant, equal means
  return 2.0 * m.cov / denom;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const PairedMoments m = paired_moments(x, y, "pearson");
  const double denom = std::sqrt(m.var_x * m.var_y);
  if (denom == 0.0) return 0.0;
  return m.cov / denom;
}

Tensor ccc_loss(Graph& g, const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("ccc_loss: shape mismatch");
  if (pred.numel() < 2)
    throw std::invalid_argument("ccc_loss: needs at least 2 samples");
  const Tensor mu_p = g.mean(pred);
  const Tensor mu_t = g.mean(target);
  const Tensor cov =
      g.mean(g.mul(g.sub_scalar(pred, mu_p), g.sub_scalar(target, mu_t)));
  const Tensor dmu = g.sub(mu_p, mu_t);
  const Tensor denom =
      g.add(g.add(g.variance(pred), g.variance(target)), g.mul(dmu, dmu));
  const Tensor agreement = g.div(g.scale(cov, 2.0), denom);
  return g.add_const(g.scale(agreement, -1.0), 1.0);
}

}  // namespace affuse
