#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ttt/inner.hpp"
#include "ttt/params.hpp"

namespace ttt {

// Multi-head TTT layer: per head, Q/K/V projections, an inner model fitted to
// (K, V) by unrolled gradient steps, and the adapted model applied to Q.
struct TTTLayerConfig {
  std::size_t channels = 64;
  std::size_t heads = 4;
  std::vector<inner::Spec> head_models;  // one per head
  inner::TrainConfig train;
  bool qk_l2_norm = false;  // per-head L2 normalization of Q and K rows
  bool zero_init_output = false;

  std::size_t head_dim() const { return channels / heads; }
  bool has_conv_head() const;
  void validate() const;
};

// Head 0 depthwise-convolutional, remaining heads gated linear units.
std::vector<inner::Spec> vit3_heads(std::size_t heads);
std::vector<inner::Spec> uniform_heads(std::size_t heads, inner::Spec spec);

// Parameter names under `prefix`:
//   wq.h, wk.h, wv.h [C x d]   per-head projections
//   wo               [C x C]   output projection
//   w0.h.i                     initial inner weights of head h
//   weta.h           [C x 1]   token-wise rate projection (dynamic lr only)
void init_ttt_layer(NamedTensors& params, const std::string& prefix, const TTTLayerConfig& cfg,
                    std::mt19937_64& rng);

// Per-head outputs F_{W*}(Q) before the output projection.
std::vector<ad::Var> ttt_heads(Binder& bind, const std::string& prefix, ad::Var x, std::optional<Grid> grid,
                               const TTTLayerConfig& cfg);
ad::Var ttt_attention(Binder& bind, const std::string& prefix, ad::Var x, std::optional<Grid> grid,
                      const TTTLayerConfig& cfg);

std::vector<Tensor> ttt_heads(const NamedTensors& params, const std::string& prefix, const Tensor& x,
                              std::optional<Grid> grid, const TTTLayerConfig& cfg);
Tensor ttt_attention(const NamedTensors& params, const std::string& prefix, const Tensor& x,
                     std::optional<Grid> grid, const TTTLayerConfig& cfg);

// ---------------------------------------------------------------------------
// Attention baselines over plain tensors. No 1/sqrt(d) inside the softmax.

Tensor softmax_attention_head(const Tensor& q, const Tensor& k, const Tensor& v);
// sigma(Q W1) W2 with W1 = K^T, W2 = V.
Tensor attention_mlp_oracle(const Tensor& q, const Tensor& k, const Tensor& v);

enum class FeatureMap { elu_plus_one, identity, relu };
Tensor apply_feature_map(FeatureMap phi, const Tensor& x);

// O_i = q_i (sum_j k_j^T v_j) / (q_i sum_j k_j^T) with q, k already mapped.
// Throws NormalizationError when a denominator falls below 1e-9.
Tensor linear_attention_head(const Tensor& q, const Tensor& k, const Tensor& v);

// Full layers using the wq/wk/wv/wo parameters of a TTT layer.
Tensor softmax_attention(const NamedTensors& params, const std::string& prefix, const Tensor& x,
                         const TTTLayerConfig& cfg);
Tensor linear_attention(const NamedTensors& params, const std::string& prefix, const Tensor& x,
                        const TTTLayerConfig& cfg, FeatureMap phi = FeatureMap::elu_plus_one);

}  // namespace ttt
