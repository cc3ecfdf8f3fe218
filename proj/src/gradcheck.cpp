#include "affuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "affuse/metrics.hpp"
#include "affuse/model.hpp"
#include "affuse/nn.hpp"
#include "affuse/rng.hpp"

namespace affuse {

GradCheckReport check_gradients(const std::string& name,
                                const std::vector<Tensor>& params,
                                const std::function<Tensor(Graph&)>& build_loss,
                                double step, double tolerance) {
  GradCheckReport rep;
  rep.name = name;
  Graph g;
  const Tensor loss = build_loss(g);
  const GradientMap gm = g.backward(loss);
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const Tensor& p : params) grads.push_back(gm.grad(p));

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p.values_mut()[i];
      p.values_mut()[i] = orig + step;
      Graph gp(false);
      const double f_plus = build_loss(gp).value();
      p.values_mut()[i] = orig - step;
      Graph gn(false);
      const double f_minus = build_loss(gn).value();
      p.values_mut()[i] = orig;
      const double fd = (f_plus - f_minus) / (2.0 * step);
      const double gi = grads[pi].at(i);
      const double rel =
          std::abs(gi - fd) / std::max({1.0, std::abs(gi), std::abs(fd)});
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.checked;
    }
  }
  rep.pass = rep.max_rel_err < tolerance;
  return rep;
}

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale,
                     bool requires_grad = false) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-scale, scale);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

void randomize(std::vector<Tensor> params, Rng& rng, double scale) {
  for (Tensor& p : params)
    for (double& v : p.values_mut()) v = rng.uniform(-scale, scale);
}

// mean(y .* probe): a smooth scalar with a distinct sensitivity per output
// element.
Tensor probe_loss(Graph& g, const Tensor& y, const Tensor& probe) {
  return g.mean(g.mul(y, probe));
}

struct BatteryEntry {
  std::string name;
  std::vector<Tensor> params;
  std::function<Tensor(Graph&)> build;
};

std::vector<BatteryEntry> make_battery() {
  std::vector<BatteryEntry> entries;
  Rng rng(20240405);

  {
    auto lin = std::make_shared<Linear>(5, 7);
    randomize({lin->weight, lin->bias}, rng, 0.6);
    Tensor x = random_tensor({7, 9}, rng, 1.0);
    Tensor probe = random_tensor({5, 9}, rng, 1.0);
    entries.push_back({"linear",
                       {lin->weight, lin->bias},
                       [lin, x, probe](Graph& g) {
                         return probe_loss(g, lin->forward(g, x), probe);
                       }});
  }
  {
    auto conv = std::make_shared<CausalConv1d>(3, 4, 3, 2);
    randomize({conv->weight, conv->bias}, rng, 0.6);
    Tensor x = random_tensor({4, 11}, rng, 1.0);
    Tensor probe = random_tensor({3, 11}, rng, 1.0);
    entries.push_back({"causal_conv",
                       {conv->weight, conv->bias},
                       [conv, x, probe](Graph& g) {
                         return probe_loss(g, conv->forward(g, x), probe);
                       }});
  }
  {
    auto block = std::make_shared<TemporalBlock>(4, 6, 3, 2, 0.25);
    std::vector<Tensor> params;
    block->collect(params);
    randomize(params, rng, 0.5);
    Tensor x = random_tensor({4, 12}, rng, 1.0);
    Tensor probe = random_tensor({6, 12}, rng, 1.0);
    entries.push_back({"temporal_block", params,
                       [block, x, probe](Graph& g) {
                         // Same dropout seed per call keeps the mask fixed, so
                         // finite differences see one deterministic function.
                         Rng drop(91);
                         return probe_loss(
                             g, block->forward(g, x, Mode::train, drop), probe);
                       }});
  }
  {
    auto stack = std::make_shared<TcnStack>(5, 4, 2, 3, 0.1);
    std::vector<Tensor> params;
    stack->collect(params);
    randomize(params, rng, 0.4);
    Tensor x = random_tensor({5, 12}, rng, 1.0);
    Tensor probe = random_tensor({4, 12}, rng, 1.0);
    entries.push_back({"tcn_stack", params,
                       [stack, x, probe](Graph& g) {
                         Rng drop(92);
                         return probe_loss(
                             g, stack->forward(g, x, Mode::train, drop), probe);
                       }});
  }
  {
    auto norm = std::make_shared<LayerNorm>(6);
    randomize({norm->gain, norm->shift}, rng, 0.8);
    Tensor x = random_tensor({6, 7}, rng, 1.0, true);
    Tensor probe = random_tensor({6, 7}, rng, 1.0);
    entries.push_back({"layer_norm",
                       {norm->gain, norm->shift, x},
                       [norm, x, probe](Graph& g) {
                         return probe_loss(g, norm->forward(g, x), probe);
                       }});
  }
  {
    Tensor x = random_tensor({4, 5}, rng, 1.5, true);
    Tensor probe = random_tensor({4, 5}, rng, 1.0);
    entries.push_back({"softmax_rows",
                       {x},
                       [x, probe](Graph& g) {
                         return probe_loss(g, g.softmax_rows(x), probe);
                       }});
  }
  {
    std::vector<Tensor> q, k, v, params;
    for (int b = 0; b < 3; ++b) {
      q.push_back(random_tensor({4, 5}, rng, 0.8, true));
      k.push_back(random_tensor({4, 5}, rng, 0.8, true));
      v.push_back(random_tensor({4, 5}, rng, 0.8, true));
    }
    for (int b = 0; b < 3; ++b) {
      params.push_back(q[b]);
      params.push_back(k[b]);
      params.push_back(v[b]);
    }
    Tensor probe = random_tensor({12, 5}, rng, 1.0);
    entries.push_back({"cross_branch_attention", params,
                       [q, k, v, probe](Graph& g) {
                         return probe_loss(g, g.cross_branch_attention(q, k, v),
                                           probe);
                       }});
  }
  {
    auto enc = std::make_shared<BranchEncoder>(6, 4);
    std::vector<Tensor> params;
    enc->collect(params);
    randomize(params, rng, 0.5);
    Tensor x = random_tensor({6, 5}, rng, 1.0);
    // Two sibling branches with fixed projections so the encoder under test
    // drives a real attention step.
    std::vector<Tensor> qs, ks, vs;
    for (int b = 0; b < 2; ++b) {
      qs.push_back(random_tensor({4, 5}, rng, 0.8));
      ks.push_back(random_tensor({4, 5}, rng, 0.8));
      vs.push_back(random_tensor({4, 5}, rng, 0.8));
    }
    Tensor probe = random_tensor({12, 5}, rng, 1.0);
    entries.push_back({"branch_encoder", params,
                       [enc, x, qs, ks, vs, probe](Graph& g) {
                         std::vector<Tensor> q{enc->query.forward(g, x), qs[0],
                                               qs[1]};
                         std::vector<Tensor> k{enc->key.forward(g, x), ks[0],
                                               ks[1]};
                         std::vector<Tensor> v{enc->value.forward(g, x), vs[0],
                                               vs[1]};
                         return probe_loss(g, g.cross_branch_attention(q, k, v),
                                           probe);
                       }});
  }
  {
    Tensor pred = random_tensor({11}, rng, 1.0, true);
    Tensor target = random_tensor({11}, rng, 1.0);
    entries.push_back({"ccc_loss",
                       {pred},
                       [pred, target](Graph& g) {
                         return ccc_loss(g, pred, target);
                       }});
  }
  {
    ModelConfig cfg;
    cfg.kind = ModelKind::unimodal;
    cfg.visual_dim = 6;
    cfg.visual_channels = 5;
    cfg.levels = 2;
    cfg.kernel_size = 3;
    cfg.dropout = 0.1;
    auto model = std::make_shared<Model>(cfg);
    randomize(model->parameters(), rng, 0.3);
    WindowInput in;
    in.visual = random_tensor({6, 12}, rng, 1.0);
    Tensor target = random_tensor({12}, rng, 1.0);
    entries.push_back({"unimodal_model", model->parameters(),
                       [model, in, target](Graph& g) {
                         Rng drop(93);
                         const Tensor pred =
                             model->forward(g, in, Mode::train, drop);
                         return ccc_loss(g, pred, target);
                       }});
  }
  {
    ModelConfig cfg;
    cfg.kind = ModelKind::multimodal;
    cfg.visual_dim = 6;
    cfg.mfcc_dim = 4;
    cfg.vggish_dim = 3;
    cfg.visual_channels = 5;
    cfg.aural_channels = 4;
    cfg.levels = 2;
    cfg.kernel_size = 3;
    cfg.dropout = 0.1;
    cfg.attention_dim = 3;
    auto model = std::make_shared<Model>(cfg);
    randomize(model->parameters(), rng, 0.3);
    WindowInput in;
    in.visual = random_tensor({6, 12}, rng, 1.0);
    in.mfcc = random_tensor({4, 12}, rng, 1.0);
    in.vggish = random_tensor({3, 12}, rng, 1.0);
    Tensor target = random_tensor({12}, rng, 1.0);
    entries.push_back({"multimodal_model", model->parameters(),
                       [model, in, target](Graph& g) {
                         Rng drop(94);
                         const Tensor pred =
                             model->forward(g, in, Mode::train, drop);
                         return ccc_loss(g, pred, target);
                       }});
  }
  return entries;
}

}  // namespace

bool run_gradcheck_battery(bool verbose) {
  bool all_pass = true;
  for (BatteryEntry& e : make_battery()) {
    const GradCheckReport rep = check_gradients(e.name, e.params, e.build);
    all_pass = all_pass && rep.pass;
    if (verbose) {
      std::printf("gradcheck %-24s max rel %.3e  (%zu elements)  %s\n",
                  rep.name.c_str(), rep.max_rel_err, rep.checked,
                  rep.pass ? "ok" : "FAIL");
    }
  }
  return all_pass;
}

}  // namespace affuse
