#include "affuse/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "affuse/binio.hpp"

namespace affuse {

namespace {

constexpr char kMagic[5] = "AFMD";
constexpr std::uint32_t kVersion = 1;

void validate(const ModelConfig& cfg) {
  if (cfg.visual_dim == 0 || cfg.visual_channels == 0 || cfg.levels == 0 ||
      cfg.kernel_size == 0 || cfg.attention_dim == 0)
    throw std::invalid_argument("ModelConfig: zero dimension");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
    throw std::invalid_argument("ModelConfig: dropout must be in [0, 1)");
  if (cfg.kind == ModelKind::multimodal &&
      (cfg.mfcc_dim == 0 || cfg.vggish_dim == 0 || cfg.aural_channels == 0))
    throw std::invalid_argument("ModelConfig: zero aural dimension");
}

}  // namespace

BranchEncoder::BranchEncoder(std::size_t in_dim, std::size_t attention_dim)
    : query(attention_dim, in_dim),
      key(attention_dim, in_dim),
      value(attention_dim, in_dim) {}

void BranchEncoder::init(Rng& rng) {
  query.init(rng);
  key.init(rng);
  value.init(rng);
}

void BranchEncoder::collect(std::vector<Tensor>& out) const {
  query.collect(out);
  key.collect(out);
  value.collect(out);
}

Model::Model(ModelConfig cfg) : cfg_(cfg) {
  validate(cfg_);
  visual_tcn_ = TcnStack(cfg_.visual_dim, cfg_.visual_channels, cfg_.levels,
                         cfg_.kernel_size, cfg_.dropout);
  if (cfg_.kind == ModelKind::unimodal) {
    visual_head_ = Linear(1, cfg_.visual_channels);
    return;
  }
  mfcc_tcn_ = TcnStack(cfg_.mfcc_dim, cfg_.aural_channels, cfg_.levels,
                       cfg_.kernel_size, cfg_.dropout);
  vggish_tcn_ = TcnStack(cfg_.vggish_dim, cfg_.aural_channels, cfg_.levels,
                         cfg_.kernel_size, cfg_.dropout);
  visual_enc_ = BranchEncoder(cfg_.visual_channels, cfg_.attention_dim);
  mfcc_enc_ = BranchEncoder(cfg_.aural_channels, cfg_.attention_dim);
  vggish_enc_ = BranchEncoder(cfg_.aural_channels, cfg_.attention_dim);
  fuse_norm_ = LayerNorm(cfg_.branch_count() * cfg_.attention_dim);
  fusion_head_ = Linear(1, cfg_.fused_dim());
  // Width arithmetic must close: attention rows + lead stream = head input.
  if (fusion_head_.in_dim() !=
      fuse_norm_.gain.shape()[0] + visual_tcn_.out_dim())
    throw std::logic_error("Model: fused width mismatch");
}

void Model::init(Rng& rng) {
  visual_tcn_.init(rng);
  if (cfg_.kind == ModelKind::unimodal) {
    visual_head_.init(rng);
    return;
  }
  mfcc_tcn_.init(rng);
  vggish_tcn_.init(rng);
  visual_enc_.init(rng);
  mfcc_enc_.init(rng);
  vggish_enc_.init(rng);
  fuse_norm_.init();
  fusion_head_.init(rng);
}

Tensor Model::forward(Graph& g, const WindowInput& in, Mode mode,
                      Rng& rng) const {
  if (!in.visual.defined() || in.visual.rows() != cfg_.visual_dim)
    throw std::invalid_argument("Model::forward: bad visual input");
  const std::size_t t_len = in.visual.cols();
  const Tensor f_visual = visual_tcn_.forward(g, in.visual, mode, rng);
  if (cfg_.kind == ModelKind::unimodal) {
    return g.reshape(visual_head_.forward(g, f_visual), {t_len});
  }
  if (!in.mfcc.defined() || !in.vggish.defined() ||
      in.mfcc.rows() != cfg_.mfcc_dim || in.vggish.rows() != cfg_.vggish_dim ||
      in.mfcc.cols() != t_len || in.vggish.cols() != t_len)
    throw std::invalid_argument("Model::forward: bad aural input");
  const Tensor f_mfcc = mfcc_tcn_.forward(g, in.mfcc, mode, rng);
  const Tensor f_vggish = vggish_tcn_.forward(g, in.vggish, mode, rng);
  // Branch order everywhere: visual, mfcc, vggish.
  const std::vector<Tensor> q = {visual_enc_.query.forward(g, f_visual),
                                 mfcc_enc_.query.forward(g, f_mfcc),
                                 vggish_enc_.query.forward(g, f_vggish)};
  const std::vector<Tensor> k = {visual_enc_.key.forward(g, f_visual),
                                 mfcc_enc_.key.forward(g, f_mfcc),
                                 vggish_enc_.key.forward(g, f_vggish)};
  const std::vector<Tensor> v = {visual_enc_.value.forward(g, f_visual),
                                 mfcc_enc_.value.forward(g, f_mfcc),
                                 vggish_enc_.value.forward(g, f_vggish)};
  const Tensor attended = g.cross_branch_attention(q, k, v);
  const Tensor normed = fuse_norm_.forward(g, attended);
  const Tensor fused = g.concat_rows(f_visual, normed);
  return g.reshape(fusion_head_.forward(g, fused), {t_len});
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  visual_tcn_.collect(out);
  if (cfg_.kind == ModelKind::unimodal) {
    visual_head_.collect(out);
    return out;
  }
  mfcc_tcn_.collect(out);
  vggish_tcn_.collect(out);
  visual_enc_.collect(out);
  mfcc_enc_.collect(out);
  vggish_enc_.collect(out);
  fuse_norm_.collect(out);
  fusion_head_.collect(out);
  return out;
}

std::vector<ParameterGroup> Model::parameter_groups() const {
  std::vector<ParameterGroup> groups;
  {
    ParameterGroup g{"visual_tcn", true, {}};
    visual_tcn_.collect(g.params);
    groups.push_back(std::move(g));
  }
  if (cfg_.kind == ModelKind::unimodal) {
    ParameterGroup g{"head", false, {}};
    visual_head_.collect(g.params);
    groups.push_back(std::move(g));
    return groups;
  }
  {
    ParameterGroup g{"branch_encoders", true, {}};
    visual_enc_.collect(g.params);
    mfcc_enc_.collect(g.params);
    vggish_enc_.collect(g.params);
    groups.push_back(std::move(g));
  }
  {
    ParameterGroup g{"aural_and_head", false, {}};
    mfcc_tcn_.collect(g.params);
    vggish_tcn_.collect(g.params);
    fuse_norm_.collect(g.params);
    fusion_head_.collect(g.params);
    groups.push_back(std::move(g));
  }
  return groups;
}

std::vector<std::size_t> Model::release_order() const {
  if (cfg_.kind == ModelKind::unimodal) return {0};
  // Encoders sit nearest the head and unfreeze first.
  return {1, 0};
}

void Model::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save: cannot open " + path);
  binio::write_magic(os, kMagic);
  binio::write_u32(os, kVersion);
  binio::write_u32(os, cfg_.kind == ModelKind::unimodal ? 0 : 1);
  binio::write_u32(os, static_cast<std::uint32_t>(cfg_.visual_dim));
  binio::write_u32(os, static_cast<std::uint32_t>(cfg_.mfcc_dim));
  binio::write_u32(os, static_cast<std::uint32_t>(cfg_.vggish_dim));
  binio::write_u32(os, static_cast<std::uint32_t>(cfg_.visual_channels));
  binio::write_u32(os, static_cast<std::uint32_t>(cfg_.aural_channels));
  binio::write_u32(os, static_cast<std::uint32_t>(cfg_.levels));
  binio::write_u32(os, static_cast<std::uint32_t>(cfg_.kernel_size));
  binio::write_u32(os, static_cast<std::uint32_t>(cfg_.attention_dim));
  binio::write_f64(os, cfg_.dropout);
  const std::vector<Tensor> params = parameters();
  binio::write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const Tensor& p : params) {
    binio::write_u32(os, static_cast<std::uint32_t>(p.ndim()));
    for (std::size_t d : p.shape())
      binio::write_u32(os, static_cast<std::uint32_t>(d));
    for (double v : p.values()) binio::write_f64(os, v);
  }
  if (!os) throw std::runtime_error("save: write failed for " + path);
}

Model Model::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load: cannot open " + path);
  binio::expect_magic(is, kMagic, "checkpoint");
  if (binio::read_u32(is, "checkpoint") != kVersion)
    throw std::runtime_error("checkpoint: unsupported version");
  ModelConfig cfg;
  cfg.kind = binio::read_u32(is, "checkpoint") == 0 ? ModelKind::unimodal
                                                    : ModelKind::multimodal;
  cfg.visual_dim = binio::read_u32(is, "checkpoint");
  cfg.mfcc_dim = binio::read_u32(is, "checkpoint");
  cfg.vggish_dim = binio::read_u32(is, "checkpoint");
  cfg.visual_channels = binio::read_u32(is, "checkpoint");
  cfg.aural_channels = binio::read_u32(is, "checkpoint");
  cfg.levels = binio::read_u32(is, "checkpoint");
  cfg.kernel_size = binio::read_u32(is, "checkpoint");
  cfg.attention_dim = binio::read_u32(is, "checkpoint");
  cfg.dropout = binio::read_f64(is, "checkpoint");
  Model model(cfg);
  std::vector<Tensor> params = model.parameters();
  const std::uint32_t count = binio::read_u32(is, "checkpoint");
  if (count != params.size())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (Tensor& p : params) {
    const std::uint32_t ndim = binio::read_u32(is, "checkpoint");
    if (ndim != p.ndim())
      throw std::runtime_error("checkpoint: tensor rank mismatch");
    for (std::size_t d : p.shape()) {
      if (binio::read_u32(is, "checkpoint") != d)
        throw std::runtime_error("checkpoint: tensor shape mismatch");
    }
    for (double& v : p.values_mut()) {
      v = binio::read_f64(is, "checkpoint");
      if (!std::isfinite(v))
        throw std::runtime_error("checkpoint: non-finite parameter");
    }
  }
  binio::expect_eof(is, "checkpoint");
  return model;
}

}  // namespace affuse
