#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "affuse/rng.hpp"

// Define-by-run reverse-mode autodiff over dense double tensors. A Graph is
// the tape for one forward pass: ops append in execution order, which is
// already topological, and backward() walks it in reverse. Parameters are
// leaf tensors created with requires_grad; everything else is rebuilt every
// pass. Tensors are immutable through the public API; the optimizer mutates
// parameter storage between steps through values_mut(), never mid-pass.

namespace affuse {

namespace detail {

struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  bool requires_grad = false;
  // true when a gradient has to flow through this node (leaf param or
  // derived from one); lets backward skip constant subtrees.
  bool needs_grad = false;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> values,
         bool requires_grad = false);

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return data_->shape; }
  std::size_t ndim() const { return data_->shape.size(); }
  std::size_t numel() const { return data_->values.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  const std::vector<double>& values() const { return data_->values; }
  // Writable view of leaf storage for the optimizer and initializers.
  std::vector<double>& values_mut();

  double at(std::size_t i) const { return data_->values.at(i); }
  double at(std::size_t r, std::size_t c) const;
  // The value of a one-element tensor.
  double value() const;

  bool requires_grad() const { return data_->requires_grad; }
  // Freezing toggle for leaf parameters. Passes that only read a frozen
  // parameter skip recording its subtree. Never flip mid-pass.
  void set_requires_grad(bool on) {
    data_->requires_grad = on;
    data_->needs_grad = on;
  }

  bool same_node(const Tensor& other) const { return data_ == other.data_; }

 private:
  friend class Graph;
  friend class GradientMap;
  std::shared_ptr<detail::TensorData> data_;
};

// Copies an r x c tensor into c x r.
Tensor transpose(const Tensor& t);

class GradientMap {
 public:
  // Gradient of the loss w.r.t. a requires_grad leaf; zeros when the leaf
  // did not influence the loss.
  Tensor grad(const Tensor& leaf) const;

 private:
  friend class Graph;
  std::unordered_map<const detail::TensorData*, std::vector<double>> grads_;
};

class Graph {
 public:
  // recording=false computes values only; use it for inference passes.
  explicit Graph(bool recording = true) : recording_(recording) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t op_count() const { return ops_.size(); }

  // c[m x n] = a[m x k] * b[k x n]
  Tensor matmul(const Tensor& a, const Tensor& b);

  // Elementwise on identical shapes.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor div(const Tensor& a, const Tensor& b);

  Tensor scale(const Tensor& a, double c);
  Tensor add_const(const Tensor& a, double c);

  // a minus a one-element tensor, broadcast over every element.
  Tensor sub_scalar(const Tensor& a, const Tensor& s);

  // y[r][c] = x[r][c] + bias[r]
  Tensor add_bias_rows(const Tensor& x, const Tensor& bias);

  Tensor relu(const Tensor& a);

  // One-element results; reductions run serially (fixed accumulation order).
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  // Biased (divide by N) variance, the convention used throughout.
  Tensor variance(const Tensor& a);

  // Stacks a [da x t] on top of b [db x t].
  Tensor concat_rows(const Tensor& a, const Tensor& b);

  // Joins 1-d tensors end to end.
  Tensor concat1d(const std::vector<Tensor>& parts);

  // 1-d slice [begin, end).
  Tensor slice1d(const Tensor& a, std::size_t begin, std::size_t end);

  // Same element count, new shape, same element order.
  Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);

  Tensor softmax_rows(const Tensor& a);

  // Inverted dropout. Training mode zeroes each element with probability
  // rate and scales survivors by 1/(1-rate); eval mode is the identity.
  // Mask draws come from rng in element order.
  Tensor dropout(const Tensor& a, double rate, bool training, Rng& rng);

  // x [in_c x t], w [out_c x in_c x k], bias [out_c] -> [out_c x t].
  Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias,
                       std::size_t dilation);

  // Normalizes each column of x [dim x t]; gain/shift are [dim].
  Tensor layer_norm_cols(const Tensor& x, const Tensor& gain, const Tensor& shift,
                         double eps);

  // Attention across three equally shaped [dk x t] streams per time step:
  // rows of Q,K,V stack in branch order, S = softmax_rows(Q K^T / sqrt(dk)),
  // and (S+1) V flattens branch-major into [3*dk x t].
  Tensor cross_branch_attention(const std::vector<Tensor>& q,
                                const std::vector<Tensor>& k,
                                const std::vector<Tensor>& v);

  // Gradients of a scalar loss w.r.t. every requires_grad leaf on the tape.
  GradientMap backward(const Tensor& loss);

 private:
  class GradSink;
  using BackwardFn =
      std::function<void(const std::vector<double>& gy, GradSink& sink)>;

  struct Op {
    std::shared_ptr<detail::TensorData> output;
    BackwardFn backward;
  };

  Tensor record(std::vector<std::size_t> shape, std::vector<double> values,
                bool needs_grad, BackwardFn backward);

  bool recording_;
  std::vector<Op> ops_;
};

}  // namespace affuse
