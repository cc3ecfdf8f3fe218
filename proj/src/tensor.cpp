#include "affuse/tensor.hpp"

#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "affuse/kernels.hpp"

namespace affuse {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape, const char* what) {
  if (shape.empty()) throw std::invalid_argument(std::string(what) + ": empty shape");
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument(std::string(what) + ": zero dimension");
    n *= d;
  }
  return n;
}

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x))
      throw std::runtime_error(std::string(what) + ": non-finite value");
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values,
               bool requires_grad) {
  const std::size_t n = shape_numel(shape, "Tensor");
  if (n != values.size())
    throw std::invalid_argument("Tensor: shape does not match value count");
  check_finite(values, "Tensor");
  data_ = std::make_shared<detail::TensorData>();
  data_->shape = std::move(shape);
  data_->values = std::move(values);
  data_->requires_grad = requires_grad;
  data_->needs_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape, "Tensor::zeros");
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value,
                    bool requires_grad) {
  const std::size_t n = shape_numel(shape, "Tensor::full");
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
  if (ndim() != 2) throw std::invalid_argument("Tensor::rows: not a matrix");
  return data_->shape[0];
}

std::size_t Tensor::cols() const {
  if (ndim() != 2) throw std::invalid_argument("Tensor::cols: not a matrix");
  return data_->shape[1];
}

std::vector<double>& Tensor::values_mut() { return data_->values; }

double Tensor::at(std::size_t r, std::size_t c) const {
  if (ndim() != 2) throw std::invalid_argument("Tensor::at: not a matrix");
  return data_->values.at(r * data_->shape[1] + c);
}

double Tensor::value() const {
  if (numel() != 1) throw std::invalid_argument("Tensor::value: not one element");
  return data_->values[0];
}

Tensor transpose(const Tensor& t) {
  const std::size_t r = t.rows();
  const std::size_t c = t.cols();
  std::vector<double> out(r * c);
  const std::vector<double>& in = t.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  return Tensor({c, r}, std::move(out));
}

Tensor GradientMap::grad(const Tensor& leaf) const {
  if (!leaf.requires_grad())
    throw std::invalid_argument("GradientMap::grad: tensor does not require grad");
  auto it = grads_.find(leaf.data_.get());
  if (it == grads_.end()) return Tensor::zeros(leaf.shape());
  return Tensor(leaf.shape(), it->second);
}

class Graph::GradSink {
 public:
  explicit GradSink(
      std::unordered_map<const detail::TensorData*, std::vector<double>>& store)
      : store_(store) {}

  // Zero-initialized gradient buffer for a node, or nullptr when no gradient
  // has to flow into it.
  double* grad_for(const std::shared_ptr<detail::TensorData>& node) {
    if (!node->needs_grad) return nullptr;
    auto [it, inserted] = store_.try_emplace(node.get());
    if (inserted) it->second.assign(node->values.size(), 0.0);
    return it->second.data();
  }

 private:
  std::unordered_map<const detail::TensorData*, std::vector<double>>& store_;
};

Tensor Graph::record(std::vector<std::size_t> shape, std::vector<double> values,
                     bool needs_grad, BackwardFn backward) {
  Tensor t;
  t.data_ = std::make_shared<detail::TensorData>();
  t.data_->shape = std::move(shape);
  t.data_->values = std::move(values);
  t.data_->requires_grad = false;
  t.data_->needs_grad = needs_grad;
  check_finite(t.data_->values, "Graph");
  if (recording_ && needs_grad && backward)
    ops_.push_back(Op{t.data_, std::move(backward)});
  return t;
}

GradientMap Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a one-element tensor");
  std::unordered_map<const detail::TensorData*, std::vector<double>> store;
  if (loss.data_->needs_grad) store[loss.data_.get()] = {1.0};
  GradSink sink(store);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    auto found = store.find(it->output.get());
    if (found == store.end()) continue;
    const std::vector<double> gy = std::move(found->second);
    store.erase(found);
    it->backward(gy, sink);
  }
  // Every op output with a buffer was consumed above, so only leaves remain.
  GradientMap gm;
  gm.grads_ = std::move(store);
  return gm;
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw std::invalid_argument("matmul: operands must be matrices");
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions differ");
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  std::vector<double> out(m * n);
  kernels::matmul(a.values().data(), b.values().data(), out.data(), m, k, n,
                  false, false);
  const bool needs = a.data_->needs_grad || b.data_->needs_grad;
  auto ad = a.data_;
  auto bd = b.data_;
  return record(
      {m, n}, std::move(out), needs,
      [ad, bd, m, k, n](const std::vector<double>& gy, GradSink& sink) {
        if (double* ga = sink.grad_for(ad)) {
          std::vector<double> tmp(m * k);
          kernels::matmul(gy.data(), bd->values.data(), tmp.data(), m, n, k,
                          false, true);
          for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
        }
        if (double* gb = sink.grad_for(bd)) {
          std::vector<double> tmp(k * n);
          kernels::matmul(ad->values.data(), gy.data(), tmp.data(), k, m, n,
                          true, false);
          for (std::size_t i = 0; i < tmp.size(); ++i) gb[i] += tmp[i];
        }
      });
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  kernels::parallel_for(n, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = av[i] + bv[i];
  });
  auto ad = a.data_;
  auto bd = b.data_;
  return record(a.shape(), std::move(out), ad->needs_grad || bd->needs_grad,
                [ad, bd](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                  if (double* gb = sink.grad_for(bd))
                    for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
                });
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  kernels::parallel_for(n, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = av[i] - bv[i];
  });
  auto ad = a.data_;
  auto bd = b.data_;
  return record(a.shape(), std::move(out), ad->needs_grad || bd->needs_grad,
                [ad, bd](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                  if (double* gb = sink.grad_for(bd))
                    for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
                });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  kernels::parallel_for(n, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = av[i] * bv[i];
  });
  auto ad = a.data_;
  auto bd = b.data_;
  return record(a.shape(), std::move(out), ad->needs_grad || bd->needs_grad,
                [ad, bd](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i)
                      ga[i] += gy[i] * bd->values[i];
                  if (double* gb = sink.grad_for(bd))
                    for (std::size_t i = 0; i < gy.size(); ++i)
                      gb[i] += gy[i] * ad->values[i];
                });
}

Tensor Graph::div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / bv[i];
  auto ad = a.data_;
  auto bd = b.data_;
  return record(a.shape(), std::move(out), ad->needs_grad || bd->needs_grad,
                [ad, bd](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i)
                      ga[i] += gy[i] / bd->values[i];
                  if (double* gb = sink.grad_for(bd))
                    for (std::size_t i = 0; i < gy.size(); ++i)
                      gb[i] -= gy[i] * ad->values[i] /
                               (bd->values[i] * bd->values[i]);
                });
}

Tensor Graph::scale(const Tensor& a, double c) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* av = a.values().data();
  kernels::parallel_for(n, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = av[i] * c;
  });
  auto ad = a.data_;
  return record(a.shape(), std::move(out), ad->needs_grad,
                [ad, c](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * c;
                });
}

Tensor Graph::add_const(const Tensor& a, double c) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* av = a.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + c;
  auto ad = a.data_;
  return record(a.shape(), std::move(out), ad->needs_grad,
                [ad](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                });
}

Tensor Graph::sub_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1)
    throw std::invalid_argument("sub_scalar: subtrahend must be one element");
  const std::size_t n = a.numel();
  const double sv = s.value();
  std::vector<double> out(n);
  const double* av = a.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - sv;
  auto ad = a.data_;
  auto sd = s.data_;
  return record(a.shape(), std::move(out), ad->needs_grad || sd->needs_grad,
                [ad, sd](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                  if (double* gs = sink.grad_for(sd)) {
                    double acc = 0.0;
                    for (double g : gy) acc += g;
                    gs[0] -= acc;
                  }
                });
}

Tensor Graph::add_bias_rows(const Tensor& x, const Tensor& bias) {
  if (x.ndim() != 2 || bias.ndim() != 1 || bias.shape()[0] != x.rows())
    throw std::invalid_argument("add_bias_rows: bias must match row count");
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  std::vector<double> out(r * c);
  const double* xv = x.values().data();
  const double* bv = bias.values().data();
  kernels::parallel_for(r, c, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] + bv[i];
  });
  auto xd = x.data_;
  auto bd = bias.data_;
  return record({r, c}, std::move(out), xd->needs_grad || bd->needs_grad,
                [xd, bd, r, c](const std::vector<double>& gy, GradSink& sink) {
                  if (double* gx = sink.grad_for(xd))
                    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
                  if (double* gb = sink.grad_for(bd)) {
                    for (std::size_t i = 0; i < r; ++i) {
                      double acc = 0.0;
                      for (std::size_t j = 0; j < c; ++j) acc += gy[i * c + j];
                      gb[i] += acc;
                    }
                  }
                });
}

Tensor Graph::relu(const Tensor& a) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* av = a.values().data();
  kernels::parallel_for(n, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  });
  auto ad = a.data_;
  return record(a.shape(), std::move(out), ad->needs_grad,
                [ad](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i)
                      if (ad->values[i] > 0.0) ga[i] += gy[i];
                });
}

Tensor Graph::sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  auto ad = a.data_;
  return record({1}, {acc}, ad->needs_grad,
                [ad](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < ad->values.size(); ++i)
                      ga[i] += gy[0];
                });
}

Tensor Graph::mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  auto ad = a.data_;
  return record({1}, {acc / n}, ad->needs_grad,
                [ad, n](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad)) {
                    const double g = gy[0] / n;
                    for (std::size_t i = 0; i < ad->values.size(); ++i) ga[i] += g;
                  }
                });
}

Tensor Graph::variance(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double mu = 0.0;
  for (double v : a.values()) mu += v;
  mu /= n;
  double acc = 0.0;
  for (double v : a.values()) acc += (v - mu) * (v - mu);
  auto ad = a.data_;
  return record({1}, {acc / n}, ad->needs_grad,
                [ad, n, mu](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad)) {
                    const double g = 2.0 * gy[0] / n;
                    for (std::size_t i = 0; i < ad->values.size(); ++i)
                      ga[i] += g * (ad->values[i] - mu);
                  }
                });
}

Tensor Graph::concat_rows(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
    throw std::invalid_argument("concat_rows: column counts differ");
  const std::size_t c = a.cols();
  const std::size_t ra = a.rows();
  const std::size_t rb = b.rows();
  std::vector<double> out;
  out.reserve((ra + rb) * c);
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  auto ad = a.data_;
  auto bd = b.data_;
  return record({ra + rb, c}, std::move(out), ad->needs_grad || bd->needs_grad,
                [ad, bd, ra, c](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < ad->values.size(); ++i)
                      ga[i] += gy[i];
                  if (double* gb = sink.grad_for(bd))
                    for (std::size_t i = 0; i < bd->values.size(); ++i)
                      gb[i] += gy[ra * c + i];
                });
}

Tensor Graph::concat1d(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat1d: no parts");
  std::size_t total = 0;
  bool needs = false;
  for (const Tensor& p : parts) {
    if (p.ndim() != 1) throw std::invalid_argument("concat1d: parts must be 1-d");
    total += p.numel();
    needs = needs || p.data_->needs_grad;
  }
  std::vector<double> out;
  out.reserve(total);
  std::vector<std::shared_ptr<detail::TensorData>> nodes;
  nodes.reserve(parts.size());
  for (const Tensor& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    nodes.push_back(p.data_);
  }
  return record({total}, std::move(out), needs,
                [nodes](const std::vector<double>& gy, GradSink& sink) {
                  std::size_t off = 0;
                  for (const auto& nd : nodes) {
                    if (double* g = sink.grad_for(nd))
                      for (std::size_t i = 0; i < nd->values.size(); ++i)
                        g[i] += gy[off + i];
                    off += nd->values.size();
                  }
                });
}

Tensor Graph::slice1d(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.ndim() != 1) throw std::invalid_argument("slice1d: not 1-d");
  if (begin >= end || end > a.numel())
    throw std::invalid_argument("slice1d: bad range");
  std::vector<double> out(a.values().begin() + begin, a.values().begin() + end);
  auto ad = a.data_;
  return record({end - begin}, std::move(out), ad->needs_grad,
                [ad, begin](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i)
                      ga[begin + i] += gy[i];
                });
}

Tensor Graph::reshape(const Tensor& a, std::vector<std::size_t> shape) {
  if (shape_numel(shape, "reshape") != a.numel())
    throw std::invalid_argument("reshape: element count changed");
  auto ad = a.data_;
  return record(std::move(shape), a.values(), ad->needs_grad,
                [ad](const std::vector<double>& gy, GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                });
}

Tensor Graph::softmax_rows(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("softmax_rows: not a matrix");
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  std::vector<double> out(r * c);
  kernels::softmax_rows(a.values().data(), out.data(), r, c);
  auto ad = a.data_;
  std::vector<double> saved = out;
  return record({r, c}, std::move(out), ad->needs_grad,
                [ad, saved = std::move(saved), r, c](const std::vector<double>& gy,
                                                     GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    kernels::softmax_rows_backward(saved.data(), gy.data(), ga, r, c);
                });
}

Tensor Graph::dropout(const Tensor& a, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return a;
  const std::size_t n = a.numel();
  const double keep_scale = 1.0 / (1.0 - rate);
  // Mask draws are serial so the stream depends only on op order.
  std::vector<double> mask(n);
  for (std::size_t i = 0; i < n; ++i)
    mask[i] = rng.uniform() >= rate ? keep_scale : 0.0;
  std::vector<double> out(n);
  const double* av = a.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * mask[i];
  auto ad = a.data_;
  return record(a.shape(), std::move(out), ad->needs_grad,
                [ad, mask = std::move(mask)](const std::vector<double>& gy,
                                             GradSink& sink) {
                  if (double* ga = sink.grad_for(ad))
                    for (std::size_t i = 0; i < gy.size(); ++i)
                      ga[i] += gy[i] * mask[i];
                });
}

Tensor Graph::causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias,
                            std::size_t dilation) {
  if (x.ndim() != 2) throw std::invalid_argument("causal_conv1d: x must be 2-d");
  if (w.ndim() != 3)
    throw std::invalid_argument("causal_conv1d: filter must be 3-d");
  if (dilation == 0) throw std::invalid_argument("causal_conv1d: zero dilation");
  const std::size_t in_c = x.shape()[0];
  const std::size_t t_len = x.shape()[1];
  const std::size_t out_c = w.shape()[0];
  const std::size_t ksize = w.shape()[2];
  if (w.shape()[1] != in_c)
    throw std::invalid_argument("causal_conv1d: filter input channels differ");
  if (bias.ndim() != 1 || bias.shape()[0] != out_c)
    throw std::invalid_argument("causal_conv1d: bias must match output channels");
  std::vector<double> out(out_c * t_len);
  kernels::causal_conv_forward(x.values().data(), w.values().data(),
                               bias.values().data(), out.data(), in_c, out_c,
                               ksize, dilation, t_len);
  auto xd = x.data_;
  auto wd = w.data_;
  auto bd = bias.data_;
  const bool needs = xd->needs_grad || wd->needs_grad || bd->needs_grad;
  return record(
      {out_c, t_len}, std::move(out), needs,
      [xd, wd, bd, in_c, out_c, ksize, dilation,
       t_len](const std::vector<double>& gy, GradSink& sink) {
        if (double* gx = sink.grad_for(xd))
          kernels::causal_conv_backward_input(gy.data(), wd->values.data(), gx,
                                              in_c, out_c, ksize, dilation, t_len);
        double* gw = sink.grad_for(wd);
        double* gb = sink.grad_for(bd);
        if (gw && gb) {
          kernels::causal_conv_backward_filter(gy.data(), xd->values.data(), gw,
                                               gb, in_c, out_c, ksize, dilation,
                                               t_len);
        } else if (gw || gb) {
          std::vector<double> tw(gw ? 0 : wd->values.size(), 0.0);
          std::vector<double> tb(gb ? 0 : out_c, 0.0);
          kernels::causal_conv_backward_filter(gy.data(), xd->values.data(),
                                               gw ? gw : tw.data(),
                                               gb ? gb : tb.data(), in_c, out_c,
                                               ksize, dilation, t_len);
        }
      });
}

Tensor Graph::layer_norm_cols(const Tensor& x, const Tensor& gain,
                              const Tensor& shift, double eps) {
  if (x.ndim() != 2) throw std::invalid_argument("layer_norm_cols: x must be 2-d");
  const std::size_t dim = x.rows();
  const std::size_t t_len = x.cols();
  if (gain.ndim() != 1 || gain.shape()[0] != dim || shift.ndim() != 1 ||
      shift.shape()[0] != dim)
    throw std::invalid_argument("layer_norm_cols: gain/shift must match rows");
  if (eps <= 0.0) throw std::invalid_argument("layer_norm_cols: eps must be > 0");
  std::vector<double> out(dim * t_len);
  auto xhat = std::make_shared<std::vector<double>>(dim * t_len);
  auto inv_std = std::make_shared<std::vector<double>>(t_len);
  kernels::layer_norm_forward(x.values().data(), gain.values().data(),
                              shift.values().data(), eps, out.data(),
                              xhat->data(), inv_std->data(), dim, t_len);
  auto xd = x.data_;
  auto gd = gain.data_;
  auto sd = shift.data_;
  const bool needs = xd->needs_grad || gd->needs_grad || sd->needs_grad;
  return record({dim, t_len}, std::move(out), needs,
                [xd, gd, sd, xhat, inv_std, dim,
                 t_len](const std::vector<double>& gy, GradSink& sink) {
                  double* gx = sink.grad_for(xd);
                  double* gg = sink.grad_for(gd);
                  double* gs = sink.grad_for(sd);
                  kernels::layer_norm_backward(gy.data(), gd->values.data(),
                                               xhat->data(), inv_std->data(), gx,
                                               gg, gs, dim, t_len);
                });
}

Tensor Graph::cross_branch_attention(const std::vector<Tensor>& q,
                                     const std::vector<Tensor>& k,
                                     const std::vector<Tensor>& v) {
  constexpr std::size_t kBranches = 3;
  if (q.size() != kBranches || k.size() != kBranches || v.size() != kBranches)
    throw std::invalid_argument("cross_branch_attention: expected 3 branches");
  const std::size_t dk = q[0].rows();
  const std::size_t t_len = q[0].cols();
  bool needs = false;
  for (std::size_t i = 0; i < kBranches; ++i) {
    for (const Tensor* t : {&q[i], &k[i], &v[i]}) {
      if (t->ndim() != 2 || t->rows() != dk || t->cols() != t_len)
        throw std::invalid_argument("cross_branch_attention: branch shape mismatch");
      needs = needs || t->data_->needs_grad;
    }
  }
  std::array<std::shared_ptr<detail::TensorData>, kBranches> qd, kd, vd;
  std::array<const double*, kBranches> qp, kp, vp;
  for (std::size_t i = 0; i < kBranches; ++i) {
    qd[i] = q[i].data_;
    kd[i] = k[i].data_;
    vd[i] = v[i].data_;
    qp[i] = qd[i]->values.data();
    kp[i] = kd[i]->values.data();
    vp[i] = vd[i]->values.data();
  }
  std::vector<double> out(kBranches * dk * t_len);
  std::shared_ptr<std::vector<double>> scores;
  if (needs && recording_)
    scores = std::make_shared<std::vector<double>>(t_len * kBranches * kBranches);
  kernels::attention_forward(qp.data(), kp.data(), vp.data(), out.data(),
                             scores ? scores->data() : nullptr, kBranches, dk,
                             t_len);
  return record(
      {kBranches * dk, t_len}, std::move(out), needs,
      [qd, kd, vd, scores, dk, t_len](const std::vector<double>& gy,
                                      GradSink& sink) {
        std::array<const double*, kBranches> qp2, kp2, vp2;
        std::array<double*, kBranches> gq, gk, gv;
        for (std::size_t i = 0; i < kBranches; ++i) {
          qp2[i] = qd[i]->values.data();
          kp2[i] = kd[i]->values.data();
          vp2[i] = vd[i]->values.data();
          gq[i] = sink.grad_for(qd[i]);
          gk[i] = sink.grad_for(kd[i]);
          gv[i] = sink.grad_for(vd[i]);
        }
        kernels::attention_backward(qp2.data(), kp2.data(), vp2.data(),
                                    scores->data(), gy.data(), gq.data(),
                                    gk.data(), gv.data(), kBranches, dk, t_len);
      });
}

}  // namespace affuse
