#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ttt/tensor.hpp"

namespace ttt::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  matmul,
  transpose,
  add,
  sub,
  mul,
  scale,
  mul_scalar,
  row_scale,
  add_bias,
  silu,
  silu_prime,
  sigmoid,
  sign,
  clip_unit,
  sqrt,
  clamp_min,
  sum,
  mean_rows,
  slice_rows,
  slice_cols,
  concat_cols,
  softmax_rows,
  layer_norm,
  cross_entropy,
  conv,
  conv_input_grad,
  conv_kernel_grad,
  l2_normalize_rows,
  reciprocal,
  pad_rows,
};

const char* op_name(OpKind kind);

class Gradients;

// Records primitive applications in evaluation order. A tape built with
// record = false evaluates eagerly and keeps no backward closures.
class Tape {
 public:
  using Backward = std::function<void(const Tape&, const Tensor& grad_out, Gradients& grads)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  OpKind kind(std::size_t id) const { return nodes_[id].kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  bool is_leaf(std::size_t id) const { return nodes_[id].kind == OpKind::leaf; }
  // False for constants and for nodes computed only from constants.
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

  Var push(OpKind kind, Tensor value, std::vector<std::size_t> inputs, Backward backward);

  // Reverse sweep from a one-element root. Leaves the root never reaches get
  // zero gradients.
  Gradients backward(Var root) const;

 private:
  struct Node {
    OpKind kind;
    Tensor value;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool needs_grad;
  };
  std::vector<Node> nodes_;
  bool record_;
};

class Gradients {
 public:
  explicit Gradients(const Tape& tape) : tape_(&tape), grads_(tape.size()) {}

  void accumulate(std::size_t id, const Tensor& g);
  void accumulate(std::size_t id, Tensor&& g);

  // Gradient of the root with respect to `v`; zeros when untouched.
  Tensor operator[](Var v) const;
  Tensor take(std::size_t id);
  bool touched(std::size_t id) const { return !grads_[id].empty(); }
  bool wants(std::size_t id) const { return tape_->needs_grad(id); }

 private:
  const Tape* tape_;
  std::vector<Tensor> grads_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. Each evaluates eagerly and records one node.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// a * s with s a one-element node.
Var mul_scalar(Var a, Var s);
// Row i of a multiplied by s[i]; s is [rows x 1].
Var row_scale(Var a, Var s);
// Adds a [cols] or [1 x cols] bias to every row.
Var add_bias(Var a, Var bias);
Var silu(Var a);
// Pointwise derivative of silu, itself differentiable.
Var silu_prime(Var a);
Var sigmoid(Var a);
// Gradient-free sign.
Var sign(Var a);
// Clamp to [-1, 1]; derivative of the smooth-L1 kernel.
Var clip_unit(Var a);
Var sqrt(Var a);
Var clamp_min(Var a, double floor);
Var sum(Var a);
Var mean_rows(Var a);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// Mean negative log-likelihood over rows of logits; labels index columns.
Var cross_entropy(Var logits, std::span<const int> labels);
Var conv3x3(Var x, Grid grid, Var kernel, ConvKind kind);
Var conv3x3_input_grad(Var dy, Grid grid, Var kernel, ConvKind kind);
Var conv3x3_kernel_grad(Var x, Var dy, Grid grid, ConvKind kind);
Var l2_normalize_rows(Var a, double eps = 1e-12);
Var reciprocal(Var a);
// Embeds a [B x C] block at row `begin` of a zero [total x C] tensor.
Var pad_rows(Var a, std::size_t begin, std::size_t total);

// ---------------------------------------------------------------------------
// Finite-difference checking.

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::vector<double> per_param;  // max relative error per parameter tensor
};

// Builds a scalar on a fresh tape from leaves holding `params`.
using TapeFunction = std::function<Var(Tape&, std::span<const Var>)>;

// Central differences at step `eps`; error per entry is
// |analytic - numeric| / max(1, |numeric|).
GradcheckResult gradcheck(const TapeFunction& f, const std::vector<Tensor>& params, double eps = 1e-5);

// Analytic gradients of f at params, one per parameter.
std::vector<Tensor> gradients(const TapeFunction& f, const std::vector<Tensor>& params);

}  // namespace ttt::ad
