#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ttt/attention.hpp"

namespace ttt {

enum class InputKind { image, tokens };
enum class Readout { mean_pool, last_token };

struct ModelConfig {
  InputKind input = InputKind::image;
  // image input
  std::size_t image_size = 32;
  std::size_t patch = 4;
  std::size_t in_channels = 3;
  // token input: sequences of `token_dim` features laid out on `token_grid`
  std::size_t token_dim = 0;
  Grid token_grid{};

  std::size_t channels = 64;
  std::size_t heads = 4;
  std::size_t depth = 4;
  std::size_t mlp_ratio = 4;
  std::size_t classes = 10;
  inner::TrainConfig inner{};
  std::vector<inner::Spec> head_models;  // empty selects vit3_heads(heads)
  Readout readout = Readout::mean_pool;
  bool qk_l2_norm = false;
  // Zero the last projection of every residual branch (TTT output, MLP out).
  bool zero_init_residual = false;

  Grid grid() const;
  std::size_t tokens() const { return grid().tokens(); }
  TTTLayerConfig layer() const;
  void validate() const;
};

// Micro ViT^3 used for desk-scale runs: 32x32 input, patch 4, dim 64, 4 heads, 4 blocks.
ModelConfig vit3_micro();

NamedTensors init_model(const ModelConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------

// [H x W x C] image -> [N x p*p*C] patch rows; patches in raster order, each
// flattened as (row, col, channel).
Tensor patch_unfold(const Tensor& image, std::size_t patch);
Tensor patch_fold(const Tensor& patches, std::size_t height, std::size_t width, std::size_t channels,
                  std::size_t patch);

ad::Var patch_embed(Binder& bind, const Tensor& image, const ModelConfig& cfg);
// Linear token embedding for token inputs.
ad::Var token_embed(Binder& bind, const Tensor& tokens, const ModelConfig& cfg);

// x <- x + CPE(x); x <- x + TTT(LN(x)); x <- x + MLP(LN(x))
ad::Var vit3_block(Binder& bind, const std::string& prefix, ad::Var x, Grid grid, const ModelConfig& cfg);

// Logits [1 x classes] for one input.
ad::Var forward_sample(Binder& bind, const Tensor& input, const ModelConfig& cfg);

// Batched inference, one logits row per input.
Tensor forward_classifier(const NamedTensors& params, std::span<const Tensor> batch, const ModelConfig& cfg);
Tensor forward_classifier(const NamedTensors& params, const Tensor& batch, const ModelConfig& cfg);

// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

struct OptState {
  NamedTensors m;
  NamedTensors v;
  std::size_t step = 0;
};

// Decoupled weight decay on matrices and kernels; vectors (biases, norms)
// are not decayed. `lr` is the scheduled rate for this step.
void adamw_step(NamedTensors& params, const NamedTensors& grads, OptState& state, const AdamWConfig& cfg, double lr);
bool decays(const std::string& name, const Tensor& param);

// Linear warm-up over `warmup` steps, then cosine decay to zero at `total`.
double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double base_lr);

// ---------------------------------------------------------------------------
// Multiply-accumulate accounting. "flops" below are MACs, the convention used
// for vision model FLOPs.

// MACs of one forward pass of the inner model over `tokens` inputs.
std::uint64_t inner_forward_macs(const inner::Spec& spec, std::size_t dim, std::size_t tokens, Grid grid = {});

struct LayerFlops {
  std::uint64_t projections = 0;     // Q, K, V and output projections
  std::uint64_t rate_projection = 0;  // token-wise learning rate (dynamic lr only)
  std::uint64_t module_forward = 0;  // the inner models applied once to N tokens (an outer module's cost)
  std::uint64_t inner_equivalent = 0;  // forward-equivalent count: epochs*(1 + 2) + 1 forwards
  std::uint64_t inner_executed = 0;    // MACs the unrolled update actually performs
  std::uint64_t softmax_core = 0;      // QK^T and AV of softmax attention at the same size

  double inner_ratio() const {
    return module_forward ? static_cast<double>(inner_equivalent) / static_cast<double>(module_forward) : 0.0;
  }
  std::uint64_t ttt_total() const { return projections + rate_projection + inner_executed; }
  std::uint64_t softmax_total() const;
};

LayerFlops ttt_layer_flops(const TTTLayerConfig& cfg, std::size_t tokens, Grid grid);

struct FlopsReport {
  std::uint64_t embed = 0;
  std::uint64_t cpe = 0;
  std::uint64_t mlp = 0;
  std::uint64_t head = 0;
  std::vector<LayerFlops> layers;

  std::uint64_t outer() const;   // everything except the inner updates
  std::uint64_t inner() const;   // executed inner MACs over all layers
  std::uint64_t total() const { return outer() + inner(); }
};

FlopsReport flops_estimate(const ModelConfig& cfg);

}  // namespace ttt
