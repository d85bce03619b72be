#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ttt/autodiff.hpp"
#include "ttt/tensor.hpp"

// Inner models F_W : R^d -> R^d, the self-supervised inner losses, and the
// unrolled gradient-descent loop that fits F_W to (K, V) pairs.
namespace ttt::inner {

enum class Kind {
  fc,             // xW
  mlp,            // SiLU-activated MLP, hidden width ratio*d, `layers` linear layers
  silu_fc,        // SiLU(xW)
  swiglu,         // (SiLU(xW1) * xW2) W3, hidden width d
  gated_fc,       // xWa * SiLU(xWb)
  conv3x3,        // full 3x3 convolution over the token grid
  dwconv3x3,      // depthwise 3x3 convolution over the token grid
  mlp_residual,   // SiLU(xW1) W2 + x
  mlp_w2_plus_i,  // SiLU(xW1) (W2 + I)
  mlp_w2_init_i,  // SiLU(xW1) W2 with W2 initialized to I
};

inline constexpr Kind kAllKinds[] = {Kind::fc,        Kind::mlp,          Kind::silu_fc,       Kind::swiglu,
                                     Kind::gated_fc,  Kind::conv3x3,      Kind::dwconv3x3,     Kind::mlp_residual,
                                     Kind::mlp_w2_plus_i, Kind::mlp_w2_init_i};

struct Spec {
  Kind kind = Kind::gated_fc;
  std::size_t ratio = 1;   // mlp only
  std::size_t layers = 2;  // mlp only

  bool is_conv() const { return kind == Kind::conv3x3 || kind == Kind::dwconv3x3; }
  friend bool operator==(const Spec&, const Spec&) = default;
};

std::string to_string(Kind kind);
std::string to_string(const Spec& spec);
Kind parse_kind(const std::string& name);
// Accepts the kind names plus "mlp_r<R>_l<L>".
Spec parse_spec(const std::string& text);

std::vector<Shape> weight_shapes(const Spec& spec, std::size_t dim);
std::size_t param_count(const Spec& spec, std::size_t dim);

struct InnerModel {
  Spec spec;
  std::size_t dim = 0;
  std::vector<Tensor> weights;
};

// Dense weights ~ U(+-1/sqrt(fan_in)); mlp_w2_init_i starts W2 at I.
InnerModel init_model(const Spec& spec, std::size_t dim, std::mt19937_64& rng);

// ---------------------------------------------------------------------------

enum class Loss { dot_product, mse, rmse, mae, smooth_l1 };
inline constexpr Loss kAllLosses[] = {Loss::dot_product, Loss::mse, Loss::rmse, Loss::mae, Loss::smooth_l1};

std::string to_string(Loss loss);
Loss parse_loss(const std::string& name);

// Number of sequential mini-batches per epoch; 1 is full-batch.
struct Partition {
  std::size_t parts = 1;
  static Partition full_batch() { return {1}; }
  static Partition sequential(std::size_t parts) { return {parts}; }
  friend bool operator==(const Partition&, const Partition&) = default;
};

struct LearningRate {
  enum class Mode { fixed, dynamic } mode = Mode::fixed;
  double eta = 1.0;
  static LearningRate fixed(double eta) { return {Mode::fixed, eta}; }
  // eta_i = eta * sigmoid(x_i W_eta)
  static LearningRate dynamic(double eta) { return {Mode::dynamic, eta}; }
};

struct TrainConfig {
  Loss loss = Loss::dot_product;
  std::size_t epochs = 1;
  Partition partition;
  LearningRate lr;
};

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const Range&, const Range&) = default;
};

// Contiguous token-order ranges; when parts does not divide n the earlier
// ranges take one extra token.
std::vector<Range> partition_batches(std::size_t n, Partition partition);

// ---------------------------------------------------------------------------
// Losses. All carry the 1/(B sqrt(d)) normalization.

double inner_loss(Loss loss, const Tensor& vhat, const Tensor& v);
Tensor inner_loss_grad(Loss loss, const Tensor& vhat, const Tensor& v);
// Entrywise d^2 L / (dV_ij dVhat_ij) in closed form.
Tensor mixed_second_derivative(Loss loss, const Tensor& vhat, const Tensor& v);

inline constexpr double kRmseFloor = 1e-12;

// ---------------------------------------------------------------------------
// Tape-level building blocks. Everything below records on the tape so outer
// gradients flow through the unrolled inner steps.

struct Trace {
  ad::Var out;
  std::vector<ad::Var> saved;  // kind-specific intermediates for param_grad
};

Trace forward(const Spec& spec, std::span<const ad::Var> weights, ad::Var x, std::optional<Grid> grid);
// dL/dW for every weight given dL/dF_W(x) = dy.
std::vector<ad::Var> param_grad(const Spec& spec, std::span<const ad::Var> weights, ad::Var x, const Trace& trace,
                                ad::Var dy, std::optional<Grid> grid);
ad::Var loss_grad(Loss loss, ad::Var vhat, ad::Var v);

// Fault injection for harness self-tests: while set, the backward of
// loss_grad for that loss is negated (forward values are unchanged).
void inject_backward_sign_fault(std::optional<Loss> loss);

// Runs the configured epochs over the partition. `token_lr` ([N x 1], the
// per-token eta_i) is required for dynamic learning rates and ignored
// otherwise. Throws DivergenceError when a weight stops being finite.
std::vector<ad::Var> update(const Spec& spec, std::span<const ad::Var> w0, ad::Var k, ad::Var v,
                            const TrainConfig& cfg, std::optional<ad::Var> token_lr, std::optional<Grid> grid);

// ---------------------------------------------------------------------------
// Tensor-level conveniences built on the tape routines above.

Tensor inner_forward(const InnerModel& model, const Tensor& x, std::optional<Grid> grid = std::nullopt);
InnerModel inner_update(const InnerModel& model, const Tensor& k, const Tensor& v, const TrainConfig& cfg,
                        const Tensor* token_lr = nullptr, std::optional<Grid> grid = std::nullopt);

}  // namespace ttt::inner
