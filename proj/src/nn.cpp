#include "affuse/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace affuse {

Linear::Linear(std::size_t out_dim, std::size_t in_dim)
    : weight(Tensor::zeros({out_dim, in_dim}, true)),
      bias(Tensor::zeros({out_dim}, true)) {}

void Linear::init(Rng& rng) {
  const double limit =
      std::sqrt(6.0 / static_cast<double>(in_dim() + out_dim()));
  for (double& w : weight.values_mut()) w = rng.uniform(-limit, limit);
  for (double& b : bias.values_mut()) b = 0.0;
}

Tensor Linear::forward(Graph& g, const Tensor& x) const {
  return g.add_bias_rows(g.matmul(weight, x), bias);
}

void Linear::collect(std::vector<Tensor>& out) const {
  out.push_back(weight);
  out.push_back(bias);
}

CausalConv1d::CausalConv1d(std::size_t out_channels, std::size_t in_channels,
                           std::size_t kernel_size, std::size_t dilation)
    : weight(Tensor::zeros({out_channels, in_channels, kernel_size}, true)),
      bias(Tensor::zeros({out_channels}, true)),
      dilation(dilation) {
  if (dilation == 0) throw std::invalid_argument("CausalConv1d: zero dilation");
}

void CausalConv1d::init(Rng& rng) {
  for (double& w : weight.values_mut()) w = rng.normal(0.0, 0.01);
  for (double& b : bias.values_mut()) b = 0.0;
}

Tensor CausalConv1d::forward(Graph& g, const Tensor& x) const {
  return g.causal_conv1d(x, weight, bias, dilation);
}

void CausalConv1d::collect(std::vector<Tensor>& out) const {
  out.push_back(weight);
  out.push_back(bias);
}

TemporalBlock::TemporalBlock(std::size_t in_channels, std::size_t out_channels,
                             std::size_t kernel_size, std::size_t dilation,
                             double dropout)
    : conv1(out_channels, in_channels, kernel_size, dilation),
      conv2(out_channels, out_channels, kernel_size, dilation),
      has_projection(in_channels != out_channels),
      dropout_rate(dropout) {
  if (has_projection) project = CausalConv1d(out_channels, in_channels, 1, 1);
}

void TemporalBlock::init(Rng& rng) {
  conv1.init(rng);
  conv2.init(rng);
  if (has_projection) project.init(rng);
}

Tensor TemporalBlock::forward(Graph& g, const Tensor& x, Mode mode,
                              Rng& rng) const {
  const bool training = mode == Mode::train;
  Tensor h = g.relu(conv1.forward(g, x));
  h = g.dropout(h, dropout_rate, training, rng);
  h = g.relu(conv2.forward(g, h));
  h = g.dropout(h, dropout_rate, training, rng);
  const Tensor res = has_projection ? project.forward(g, x) : x;
  return g.relu(g.add(res, h));
}

void TemporalBlock::collect(std::vector<Tensor>& out) const {
  conv1.collect(out);
  conv2.collect(out);
  if (has_projection) project.collect(out);
}

TcnStack::TcnStack(std::size_t in_dim, std::size_t channels, std::size_t levels,
                   std::size_t kernel_size, double dropout) {
  if (levels == 0) throw std::invalid_argument("TcnStack: needs at least 1 level");
  blocks.reserve(levels);
  std::size_t dilation = 1;
  std::size_t in_c = in_dim;
  for (std::size_t l = 0; l < levels; ++l) {
    blocks.emplace_back(in_c, channels, kernel_size, dilation, dropout);
    in_c = channels;
    dilation *= 2;
  }
}

void TcnStack::init(Rng& rng) {
  for (TemporalBlock& b : blocks) b.init(rng);
}

std::size_t TcnStack::out_dim() const { return blocks.back().conv2.out_channels(); }

std::size_t TcnStack::receptive_field() const {
  std::size_t field = 1;
  for (const TemporalBlock& b : blocks) {
    field += (b.conv1.kernel_size() - 1) * b.conv1.dilation;
    field += (b.conv2.kernel_size() - 1) * b.conv2.dilation;
  }
  return field;
}

Tensor TcnStack::forward(Graph& g, const Tensor& x, Mode mode, Rng& rng) const {
  Tensor h = x;
  for (const TemporalBlock& b : blocks) h = b.forward(g, h, mode, rng);
  return h;
}

void TcnStack::collect(std::vector<Tensor>& out) const {
  for (const TemporalBlock& b : blocks) b.collect(out);
}

LayerNorm::LayerNorm(std::size_t dim)
    : gain(Tensor::full({dim}, 1.0, true)), shift(Tensor::zeros({dim}, true)) {}

void LayerNorm::init() {
  for (double& v : gain.values_mut()) v = 1.0;
  for (double& v : shift.values_mut()) v = 0.0;
}

Tensor LayerNorm::forward(Graph& g, const Tensor& x) const {
  return g.layer_norm_cols(x, gain, shift, eps);
}

void LayerNorm::collect(std::vector<Tensor>& out) const {
  out.push_back(gain);
  out.push_back(shift);
}

}  // namespace affuse
