#pragma once

#include <string>
#include <vector>

#include "affuse/nn.hpp"
#include "affuse/rng.hpp"
#include "affuse/tensor.hpp"

namespace affuse {

enum class ModelKind { unimodal, multimodal };

struct ModelConfig {
  ModelKind kind = ModelKind::multimodal;
  std::size_t visual_dim = 512;
  std::size_t mfcc_dim = 39;
  std::size_t vggish_dim = 128;
  std::size_t visual_channels = 128;
  std::size_t aural_channels = 32;
  std::size_t levels = 4;
  std::size_t kernel_size = 5;
  double dropout = 0.1;
  std::size_t attention_dim = 32;

  std::size_t branch_count() const { return 3; }
  std::size_t fused_dim() const {
    return visual_channels + branch_count() * attention_dim;
  }
};

// Query/key/value projections that map one branch's features into the shared
// attention width.
struct BranchEncoder {
  Linear query;
  Linear key;
  Linear value;

  BranchEncoder() = default;
  BranchEncoder(std::size_t in_dim, std::size_t attention_dim);

  void init(Rng& rng);
  void collect(std::vector<Tensor>& out) const;
};

// One training/inference window. mfcc/vggish stay default-constructed for
// unimodal models.
struct WindowInput {
  Tensor visual;  // visual_dim x t
  Tensor mfcc;    // mfcc_dim x t
  Tensor vggish;  // vggish_dim x t
};

struct ParameterGroup {
  std::string name;
  bool freezable = false;
  std::vector<Tensor> params;
};

// The full regression network for one emotion dimension: a visual TCN,
// optionally joined by two aural TCNs whose outputs attend across branches
// (visual, mfcc, vggish) before the visual stream is concatenated back in
// front of the fused head.
class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  void init(Rng& rng);

  // Per-frame predictions, shape [t].
  Tensor forward(Graph& g, const WindowInput& in, Mode mode, Rng& rng) const;

  // Flat parameter list in declaration order; checkpoints use this order.
  std::vector<Tensor> parameters() const;

  // Disjoint, exhaustive split of parameters(). Freezable groups come first.
  std::vector<ParameterGroup> parameter_groups() const;

  // Indices into parameter_groups() in unfreeze order, nearest the output
  // head first.
  std::vector<std::size_t> release_order() const;

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  ModelConfig cfg_;
  TcnStack visual_tcn_;
  Linear visual_head_;   // unimodal only
  TcnStack mfcc_tcn_;    // multimodal only, as are the rest
  TcnStack vggish_tcn_;
  BranchEncoder visual_enc_;
  BranchEncoder mfcc_enc_;
  BranchEncoder vggish_enc_;
  LayerNorm fuse_norm_;
  Linear fusion_head_;
};

}  // namespace affuse
