#pragma once

#include <cstddef>
#include <vector>

#include "affuse/rng.hpp"
#include "affuse/tensor.hpp"

// Network building blocks over channels x time matrices. Blocks own their
// parameter tensors and expose collect() so owners can assemble flat,
// declaration-ordered parameter lists (the order checkpoints rely on).

namespace affuse {

enum class Mode { train, eval };

struct Linear {
  Tensor weight;  // out x in
  Tensor bias;    // out

  Linear() = default;
  Linear(std::size_t out_dim, std::size_t in_dim);

  // Glorot-uniform weight, zero bias.
  void init(Rng& rng);

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }

  // x: in x t -> out x t, applied per time step.
  Tensor forward(Graph& g, const Tensor& x) const;

  void collect(std::vector<Tensor>& out) const;
};

struct CausalConv1d {
  Tensor weight;  // out x in x k
  Tensor bias;    // out
  std::size_t dilation = 1;

  CausalConv1d() = default;
  CausalConv1d(std::size_t out_channels, std::size_t in_channels,
               std::size_t kernel_size, std::size_t dilation);

  // Weights from N(0, 0.01^2), zero bias.
  void init(Rng& rng);

  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t out_channels() const { return weight.shape()[0]; }
  std::size_t kernel_size() const { return weight.shape()[2]; }

  Tensor forward(Graph& g, const Tensor& x) const;

  void collect(std::vector<Tensor>& out) const;
};

// Two dilated causal convs, each followed by ReLU and dropout, plus a
// residual connection (1x1 projection when channel counts differ) and a
// final ReLU.
struct TemporalBlock {
  CausalConv1d conv1;
  CausalConv1d conv2;
  CausalConv1d project;  // 1x1, only when in != out
  bool has_projection = false;
  double dropout_rate = 0.0;

  TemporalBlock() = default;
  TemporalBlock(std::size_t in_channels, std::size_t out_channels,
                std::size_t kernel_size, std::size_t dilation, double dropout);

  void init(Rng& rng);

  Tensor forward(Graph& g, const Tensor& x, Mode mode, Rng& rng) const;

  void collect(std::vector<Tensor>& out) const;
};

// Stack of temporal blocks with dilation doubling per level (1, 2, 4, ...).
struct TcnStack {
  std::vector<TemporalBlock> blocks;

  TcnStack() = default;
  TcnStack(std::size_t in_dim, std::size_t channels, std::size_t levels,
           std::size_t kernel_size, double dropout);

  void init(Rng& rng);

  std::size_t out_dim() const;

  // Frames an output step can see: 1 + 2*(k-1)*(2^levels - 1).
  std::size_t receptive_field() const;

  Tensor forward(Graph& g, const Tensor& x, Mode mode, Rng& rng) const;

  void collect(std::vector<Tensor>& out) const;
};

// Per-column (per time step) layer norm with learned gain and shift.
struct LayerNorm {
  Tensor gain;
  Tensor shift;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  void init();  // gain 1, shift 0

  Tensor forward(Graph& g, const Tensor& x) const;

  void collect(std::vector<Tensor>& out) const;
};

}  // namespace affuse
