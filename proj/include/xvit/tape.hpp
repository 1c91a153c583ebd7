#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "xvit/attention.hpp"
#include "xvit/tensor.hpp"

namespace xvit::grad {

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

// Reverse-mode record over the closed op set. Every op evaluates eagerly
// with the kernels from ops.hpp and appends a node holding what its adjoint
// needs. backward() walks the nodes in exact reverse order, once.
//
// A Tape is single-owner; it is not safe to share between threads.
class Tape {
 public:
  using Value = Var;

  // Constant: no gradient flows into it.
  Var input(const Tensor& t);
  // Trainable leaf keyed by the tensor's address; asking for the same
  // tensor again returns the same Var so gradients accumulate in one place.
  Var param(const Tensor& t);
  // Trainable leaf without identity tracking.
  Var leaf(const Tensor& t);

  const Tensor& value(Var v) const;

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var scale(Var a, double s);
  Var add_bias(Var x, Var b);
  Var affine(Var x, Var scale, Var shift);
  Var gelu(Var a);
  Var softmax_rows(Var a);
  // Normalizes every row of a [R, D] matrix across its columns, scaled by
  // gammas[head].
  Var xnorm_rows(Var a, Var gammas, std::size_t head, double eps);
  Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t padding);
  Var dwconv(Var x, Var w, Var b);
  Var tokens_to_grid(Var x, std::size_t rows, std::size_t cols);
  Var grid_to_tokens(Var x);
  Var slice_rows(Var a, std::size_t start, std::size_t count);
  Var concat_rows(Var a, Var b);
  Var concat_rows(std::span<const Var> parts);
  Var slice_cols(Var a, std::size_t start, std::size_t width);
  Var concat_cols(std::span<const Var> parts);

  // Same head decomposition and kernel sequence as xvit::attention, so the
  // recorded forward is bit-identical to the plain one.
  Var attention(Mechanism m, Var xq, Var xkv, const AttentionParams& p);

  // Mean softmax cross-entropy of logits [B, K] against labels.
  Var cross_entropy(Var logits, std::span<const int> labels);
  // sum(a * w) as a [1] tensor; w is a constant.
  Var weighted_sum(Var a, const Tensor& w);

  // Seeds d(loss)/d(loss) = 1. loss must hold one element. A tape can be
  // differentiated once; later calls or ops throw TapeError.
  void backward(Var loss);

  // Accumulated gradient, zeros if nothing flowed into v.
  Tensor grad(Var v) const;
  // Gradient of a tensor registered through param().
  Tensor grad_of(const Tensor& param) const;
  bool has_param(const Tensor& param) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn);
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }
  void accumulate(Var v, const Tensor& g);
  void check_open() const;
  void check_var(Var v) const;

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> params_;
  bool consumed_ = false;
};

}  // namespace xvit::grad
