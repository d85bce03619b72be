#include "ttt/attention.hpp"

#include <algorithm>
#include <cmath>

namespace ttt {

namespace {

std::string head_name(const std::string& prefix, const char* what, std::size_t h) {
  return prefix + "." + what + "." + std::to_string(h);
}

std::string w0_name(const std::string& prefix, std::size_t h, std::size_t i) {
  return prefix + ".w0." + std::to_string(h) + "." + std::to_string(i);
}

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

const Tensor& param(const NamedTensors& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  const std::size_t r = parts.front().dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) total += p.dim(1);
  Tensor out({r, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < r; ++i) std::copy_n(p.raw() + i * w, w, out.raw() + i * total + off);
    off += w;
  }
  return out;
}

}  // namespace

bool TTTLayerConfig::has_conv_head() const {
  return std::any_of(head_models.begin(), head_models.end(), [](const inner::Spec& s) { return s.is_conv(); });
}

void TTTLayerConfig::validate() const {
  if (heads == 0 || channels == 0 || channels % heads != 0) {
    throw ConfigError("channels (" + std::to_string(channels) + ") must be a positive multiple of heads (" +
                      std::to_string(heads) + ")");
  }
  if (head_models.size() != heads) throw ConfigError("need one inner model per head");
  if (train.epochs == 0) throw ConfigError("inner epochs must be >= 1");
  if (train.partition.parts == 0) throw ConfigError("inner partition must have at least one batch");
}

std::vector<inner::Spec> vit3_heads(std::size_t heads) {
  std::vector<inner::Spec> s(heads, inner::Spec{inner::Kind::gated_fc});
  if (!s.empty()) s[0] = inner::Spec{inner::Kind::dwconv3x3};
  return s;
}

std::vector<inner::Spec> uniform_heads(std::size_t heads, inner::Spec spec) { return std::vector(heads, spec); }

void init_ttt_layer(NamedTensors& params, const std::string& prefix, const TTTLayerConfig& cfg,
                    std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t c = cfg.channels, d = cfg.head_dim();
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    params[head_name(prefix, "wq", h)] = uniform({c, d}, bound, rng);
    params[head_name(prefix, "wk", h)] = uniform({c, d}, bound, rng);
    params[head_name(prefix, "wv", h)] = uniform({c, d}, bound, rng);
    const auto w0 = inner::init_model(cfg.head_models[h], d, rng);
    for (std::size_t i = 0; i < w0.weights.size(); ++i) params[w0_name(prefix, h, i)] = w0.weights[i];
    if (cfg.train.lr.mode == inner::LearningRate::Mode::dynamic) {
      params[head_name(prefix, "weta", h)] = uniform({c, 1}, bound, rng);
    }
  }
  params[prefix + ".wo"] = cfg.zero_init_output ? Tensor::zeros({c, c}) : uniform({c, c}, bound, rng);
}

std::vector<ad::Var> ttt_heads(Binder& bind, const std::string& prefix, ad::Var x, std::optional<Grid> grid,
                               const TTTLayerConfig& cfg) {
  cfg.validate();
  if (x.value().rank() != 2 || x.cols() != cfg.channels) {
    throw DimensionError("ttt_attention: input " + shape_string(x.shape()) + " does not have " +
                         std::to_string(cfg.channels) + " channels");
  }
  if (cfg.has_conv_head() && (!grid || grid->tokens() != x.rows())) {
    throw GridError("ttt_attention: convolutional heads need the tokens laid out on a grid");
  }
  const bool dynamic = cfg.train.lr.mode == inner::LearningRate::Mode::dynamic;
  std::vector<ad::Var> outs;
  outs.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    ad::Var q = ad::matmul(x, bind(head_name(prefix, "wq", h)));
    ad::Var k = ad::matmul(x, bind(head_name(prefix, "wk", h)));
    ad::Var v = ad::matmul(x, bind(head_name(prefix, "wv", h)));
    if (cfg.qk_l2_norm) {
      q = ad::l2_normalize_rows(q);
      k = ad::l2_normalize_rows(k);
    }
    const auto& spec = cfg.head_models[h];
    std::vector<ad::Var> w0;
    for (std::size_t i = 0; i < inner::weight_shapes(spec, cfg.head_dim()).size(); ++i) {
      w0.push_back(bind(w0_name(prefix, h, i)));
    }
    std::optional<ad::Var> token_lr;
    if (dynamic) {
      token_lr = ad::scale(ad::sigmoid(ad::matmul(x, bind(head_name(prefix, "weta", h)))), cfg.train.lr.eta);
    }
    const auto grid_h = spec.is_conv() ? grid : std::nullopt;
    const auto w_star = inner::update(spec, w0, k, v, cfg.train, token_lr, grid_h);
    outs.push_back(inner::forward(spec, w_star, q, grid_h).out);
  }
  return outs;
}

ad::Var ttt_attention(Binder& bind, const std::string& prefix, ad::Var x, std::optional<Grid> grid,
                      const TTTLayerConfig& cfg) {
  const auto heads = ttt_heads(bind, prefix, x, grid, cfg);
  ad::Var cat = heads.size() == 1 ? heads[0] : ad::concat_cols(heads);
  return ad::matmul(cat, bind(prefix + ".wo"));
}

std::vector<Tensor> ttt_heads(const NamedTensors& params, const std::string& prefix, const Tensor& x,
                              std::optional<Grid> grid, const TTTLayerConfig& cfg) {
  ad::Tape tape(false);
  Binder bind(tape, params);
  std::vector<Tensor> out;
  for (const auto& v : ttt_heads(bind, prefix, tape.constant(x), grid, cfg)) out.push_back(v.value());
  return out;
}

Tensor ttt_attention(const NamedTensors& params, const std::string& prefix, const Tensor& x,
                     std::optional<Grid> grid, const TTTLayerConfig& cfg) {
  ad::Tape tape(false);
  Binder bind(tape, params);
  return ttt_attention(bind, prefix, tape.constant(x), grid, cfg).value();
}

// ---------------------------------------------------------------------------

Tensor softmax_attention_head(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.rank() != 2 || v.dim(0) != k.dim(0)) {
    throw DimensionError("softmax_attention: Q, K, V shapes disagree");
  }
  return matmul(softmax_rows(matmul(q, transpose(k))), v);
}

Tensor attention_mlp_oracle(const Tensor& q, const Tensor& k, const Tensor& v) {
  const Tensor w1 = transpose(k);
  const Tensor& w2 = v;
  return matmul(softmax_rows(matmul(q, w1)), w2);
}

Tensor apply_feature_map(FeatureMap phi, const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) {
    switch (phi) {
      case FeatureMap::elu_plus_one: v = v > 0.0 ? v + 1.0 : std::exp(v); break;
      case FeatureMap::identity: break;
      case FeatureMap::relu: v = std::max(v, 0.0); break;
    }
  }
  return out;
}

Tensor linear_attention_head(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw DimensionError("linear_attention: Q, K, V shapes disagree");
  }
  const std::size_t n = q.dim(0), d = q.dim(1);
  const Tensor kv = matmul(transpose(k), v);  // [d x dv]
  Tensor ksum({d, 1});
  for (std::size_t j = 0; j < k.dim(0); ++j)
    for (std::size_t c = 0; c < d; ++c) ksum[c] += k.at(j, c);
  Tensor num = matmul(q, kv);
  const Tensor den = matmul(q, ksum);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(std::abs(den[i]) >= 1e-9)) {
      throw NormalizationError("linear_attention: normalizer " + std::to_string(den[i]) + " at row " +
                               std::to_string(i));
    }
    for (std::size_t c = 0; c < num.dim(1); ++c) num.at(i, c) /= den[i];
  }
  return num;
}

namespace {

template <typename HeadFn>
Tensor multi_head(const NamedTensors& params, const std::string& prefix, const Tensor& x, const TTTLayerConfig& cfg,
                  HeadFn&& head) {
  cfg.validate();
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Tensor q = matmul(x, param(params, head_name(prefix, "wq", h)));
    Tensor k = matmul(x, param(params, head_name(prefix, "wk", h)));
    Tensor v = matmul(x, param(params, head_name(prefix, "wv", h)));
    outs.push_back(head(q, k, v));
  }
  return matmul(outs.size() == 1 ? outs[0] : concat_cols(outs), param(params, prefix + ".wo"));
}

}  // namespace

Tensor softmax_attention(const NamedTensors& params, const std::string& prefix, const Tensor& x,
                         const TTTLayerConfig& cfg) {
  return multi_head(params, prefix, x, cfg,
                    [](const Tensor& q, const Tensor& k, const Tensor& v) { return softmax_attention_head(q, k, v); });
}

Tensor linear_attention(const NamedTensors& params, const std::string& prefix, const Tensor& x,
                        const TTTLayerConfig& cfg, FeatureMap phi) {
  return multi_head(params, prefix, x, cfg, [phi](const Tensor& q, const Tensor& k, const Tensor& v) {
    return linear_attention_head(apply_feature_map(phi, q), apply_feature_map(phi, k), v);
  });
}

}  // namespace ttt
