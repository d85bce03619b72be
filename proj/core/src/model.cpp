#include "ttt/model.hpp"

#include <cmath>
#include <numbers>

namespace ttt {

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i); }

std::uint64_t conv_taps(Grid g) {
  if (g.height == 0 || g.width == 0) return 0;
  return static_cast<std::uint64_t>(3 * g.height - 2) * (3 * g.width - 2);
}

}  // namespace

Grid ModelConfig::grid() const {
  if (input == InputKind::tokens) return token_grid;
  if (patch == 0) return {};
  return {image_size / patch, image_size / patch};
}

TTTLayerConfig ModelConfig::layer() const {
  TTTLayerConfig l;
  l.channels = channels;
  l.heads = heads;
  l.head_models = head_models.empty() ? vit3_heads(heads) : head_models;
  l.train = inner;
  l.qk_l2_norm = qk_l2_norm;
  l.zero_init_output = zero_init_residual;
  return l;
}

void ModelConfig::validate() const {
  if (heads == 0 || channels % heads != 0) throw ConfigError("embed dim must be a multiple of the head count");
  if (depth == 0 || classes == 0 || mlp_ratio == 0) throw ConfigError("depth, classes and mlp ratio must be positive");
  if (input == InputKind::image) {
    if (patch == 0 || image_size % patch != 0) {
      throw ConfigError("patch size " + std::to_string(patch) + " does not divide image size " +
                        std::to_string(image_size));
    }
  } else if (token_dim == 0 || token_grid.tokens() == 0) {
    throw ConfigError("token input needs a feature size and a grid");
  }
  layer().validate();
}

ModelConfig vit3_micro() {
  ModelConfig c;
  c.image_size = 32;
  c.patch = 4;
  c.channels = 64;
  c.heads = 4;
  c.depth = 4;
  c.classes = 10;
  c.inner = {inner::Loss::dot_product, 1, inner::Partition::full_batch(), inner::LearningRate::fixed(1.0)};
  return c;
}

NamedTensors init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  NamedTensors p;
  const std::size_t c = cfg.channels;
  const std::size_t in = cfg.input == InputKind::image ? cfg.patch * cfg.patch * cfg.in_channels : cfg.token_dim;
  p["embed.w"] = uniform({in, c}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  p["embed.b"] = Tensor::zeros({c});
  const std::size_t hidden = cfg.mlp_ratio * c;
  const TTTLayerConfig layer = cfg.layer();
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string b = block_prefix(i);
    p[b + ".cpe.k"] = uniform({9, c}, 1.0 / 3.0, rng);
    p[b + ".cpe.b"] = Tensor::zeros({c});
    p[b + ".ln1.g"] = Tensor::full({c}, 1.0);
    p[b + ".ln1.b"] = Tensor::zeros({c});
    init_ttt_layer(p, b + ".attn", layer, rng);
    p[b + ".ln2.g"] = Tensor::full({c}, 1.0);
    p[b + ".ln2.b"] = Tensor::zeros({c});
    p[b + ".mlp.w1"] = uniform({c, hidden}, 1.0 / std::sqrt(static_cast<double>(c)), rng);
    p[b + ".mlp.b1"] = Tensor::zeros({hidden});
    p[b + ".mlp.w2"] = cfg.zero_init_residual ? Tensor::zeros({hidden, c})
                                              : uniform({hidden, c}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    p[b + ".mlp.b2"] = Tensor::zeros({c});
  }
  p["head.w"] = uniform({c, cfg.classes}, 1.0 / std::sqrt(static_cast<double>(c)), rng);
  p["head.b"] = Tensor::zeros({cfg.classes});
  return p;
}

// ---------------------------------------------------------------------------

Tensor patch_unfold(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3) throw DimensionError("patch_unfold: expected [H x W x C], got " + shape_string(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("patch size " + std::to_string(patch) + " does not divide a " + std::to_string(h) + "x" +
                      std::to_string(w) + " image");
  }
  const std::size_t gh = h / patch, gw = w / patch, row = patch * patch * c;
  Tensor out({gh * gw, row});
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      double* dst = out.raw() + (py * gw + px) * row;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            *dst++ = image.raw()[((py * patch + y) * w + (px * patch + x)) * c + ch];
    }
  return out;
}

Tensor patch_fold(const Tensor& patches, std::size_t height, std::size_t width, std::size_t channels,
                  std::size_t patch) {
  const std::size_t gh = height / patch, gw = width / patch, row = patch * patch * channels;
  if (patches.shape() != Shape{gh * gw, row}) throw DimensionError("patch_fold: patch matrix has the wrong shape");
  Tensor img({height, width, channels});
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      const double* src = patches.raw() + (py * gw + px) * row;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < channels; ++ch)
            img.raw()[((py * patch + y) * width + (px * patch + x)) * channels + ch] = *src++;
    }
  return img;
}

ad::Var patch_embed(Binder& bind, const Tensor& image, const ModelConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
      image.dim(2) != cfg.in_channels) {
    throw DimensionError("patch_embed: image " + shape_string(image.shape()) + " does not match the model");
  }
  ad::Var patches = bind.tape().constant(patch_unfold(image, cfg.patch));
  return ad::add_bias(ad::matmul(patches, bind("embed.w")), bind("embed.b"));
}

ad::Var token_embed(Binder& bind, const Tensor& tokens, const ModelConfig& cfg) {
  if (tokens.rank() != 2 || tokens.dim(0) != cfg.token_grid.tokens() || tokens.dim(1) != cfg.token_dim) {
    throw DimensionError("token_embed: sequence " + shape_string(tokens.shape()) + " does not match the model");
  }
  return ad::add_bias(ad::matmul(bind.tape().constant(tokens), bind("embed.w")), bind("embed.b"));
}

ad::Var vit3_block(Binder& bind, const std::string& prefix, ad::Var x, Grid grid, const ModelConfig& cfg) {
  using namespace ad;
  // conditional positional encoding
  x = add(x, add_bias(conv3x3(x, grid, bind(prefix + ".cpe.k"), ConvKind::depthwise), bind(prefix + ".cpe.b")));

  Var h = layer_norm(x, bind(prefix + ".ln1.g"), bind(prefix + ".ln1.b"));
  x = add(x, ttt_attention(bind, prefix + ".attn", h, grid, cfg.layer()));

  h = layer_norm(x, bind(prefix + ".ln2.g"), bind(prefix + ".ln2.b"));
  h = silu(add_bias(matmul(h, bind(prefix + ".mlp.w1")), bind(prefix + ".mlp.b1")));
  h = add_bias(matmul(h, bind(prefix + ".mlp.w2")), bind(prefix + ".mlp.b2"));
  return add(x, h);
}

ad::Var forward_sample(Binder& bind, const Tensor& input, const ModelConfig& cfg) {
  ad::Var x = cfg.input == InputKind::image ? patch_embed(bind, input, cfg) : token_embed(bind, input, cfg);
  const Grid grid = cfg.grid();
  for (std::size_t i = 0; i < cfg.depth; ++i) x = vit3_block(bind, block_prefix(i), x, grid, cfg);
  ad::Var pooled = cfg.readout == Readout::mean_pool ? ad::mean_rows(x) : ad::slice_rows(x, x.rows() - 1, x.rows());
  return ad::add_bias(ad::matmul(pooled, bind("head.w")), bind("head.b"));
}

Tensor forward_classifier(const NamedTensors& params, std::span<const Tensor> batch, const ModelConfig& cfg) {
  cfg.validate();
  Tensor out({batch.size(), cfg.classes});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ad::Tape tape(false);
    Binder bind(tape, params);
    const Tensor& logits = forward_sample(bind, batch[i], cfg).value();
    std::copy(logits.data().begin(), logits.data().end(), out.raw() + i * cfg.classes);
  }
  return out;
}

Tensor forward_classifier(const NamedTensors& params, const Tensor& batch, const ModelConfig& cfg) {
  if (batch.rank() < 2) throw DimensionError("forward_classifier: batch needs a leading sample axis");
  const Shape item(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t per = shape_size(item);
  std::vector<Tensor> samples;
  for (std::size_t i = 0; i < batch.dim(0); ++i) {
    samples.emplace_back(item, std::span<const double>(batch.raw() + i * per, per));
  }
  return forward_classifier(params, std::span<const Tensor>(samples), cfg);
}

// ---------------------------------------------------------------------------

bool decays(const std::string&, const Tensor& param) { return param.rank() >= 2; }

void adamw_step(NamedTensors& params, const NamedTensors& grads, OptState& state, const AdamWConfig& cfg, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (g.shape() != p.shape()) throw DimensionError("adamw: gradient shape mismatch for " + name);
    Tensor& m = state.m.try_emplace(name, Tensor::zeros(p.shape())).first->second;
    Tensor& v = state.v.try_emplace(name, Tensor::zeros(p.shape())).first->second;
    const double wd = decays(name, p) ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * wd * p[i];
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double base_lr) {
  if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base_lr;
  const double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

// ---------------------------------------------------------------------------

std::uint64_t inner_forward_macs(const inner::Spec& spec, std::size_t dim, std::size_t tokens, Grid grid) {
  const std::uint64_t n = tokens, d = dim;
  using inner::Kind;
  switch (spec.kind) {
    case Kind::fc:
    case Kind::silu_fc: return n * d * d;
    case Kind::gated_fc:
    case Kind::mlp_residual:
    case Kind::mlp_w2_plus_i:
    case Kind::mlp_w2_init_i: return 2 * n * d * d;
    case Kind::swiglu: return 3 * n * d * d;
    case Kind::conv3x3: return conv_taps(grid) * d * d;
    case Kind::dwconv3x3: return conv_taps(grid) * d;
    case Kind::mlp: {
      std::uint64_t m = 0;
      for (const auto& s : inner::weight_shapes(spec, dim)) m += n * s[0] * s[1];
      return m;
    }
  }
  return 0;
}

namespace {

// MACs of the analytic weight gradient for a batch of `tokens`.
std::uint64_t inner_backward_macs(const inner::Spec& spec, std::size_t dim, std::size_t tokens, Grid grid) {
  const std::uint64_t n = tokens, d = dim;
  const std::uint64_t fwd = inner_forward_macs(spec, dim, tokens, grid);
  using inner::Kind;
  switch (spec.kind) {
    case Kind::fc:
    case Kind::silu_fc:
    case Kind::gated_fc:
    case Kind::conv3x3:
    case Kind::dwconv3x3: return fwd;
    case Kind::swiglu: return 4 * n * d * d;
    case Kind::mlp_residual:
    case Kind::mlp_w2_plus_i:
    case Kind::mlp_w2_init_i:
    case Kind::mlp: {
      const auto shapes = inner::weight_shapes(spec, dim);
      // every weight gradient plus the input gradient of all but the first layer
      return 2 * fwd - n * shapes[0][0] * shapes[0][1];
    }
  }
  return 0;
}

}  // namespace

std::uint64_t LayerFlops::softmax_total() const { return projections + softmax_core; }

LayerFlops ttt_layer_flops(const TTTLayerConfig& cfg, std::size_t tokens, Grid grid) {
  cfg.validate();
  const std::uint64_t n = tokens, c = cfg.channels, d = cfg.head_dim();
  LayerFlops f;
  f.projections = 3 * n * c * d * cfg.heads + n * c * c;
  if (cfg.train.lr.mode == inner::LearningRate::Mode::dynamic) f.rate_projection = n * c * cfg.heads;
  const std::uint64_t epochs = cfg.train.epochs;
  for (const auto& spec : cfg.head_models) {
    const std::uint64_t fwd = inner_forward_macs(spec, d, tokens, grid);
    const std::uint64_t bwd = inner_backward_macs(spec, d, tokens, grid);
    // conv models revisit the full grid once per mini-batch
    const std::uint64_t passes = spec.is_conv() ? cfg.train.partition.parts : 1;
    f.module_forward += fwd;
    f.inner_equivalent += epochs * 3 * fwd + fwd;
    f.inner_executed += epochs * passes * (fwd + bwd) + fwd;
    f.softmax_core += 2 * n * n * d;
  }
  return f;
}

std::uint64_t FlopsReport::outer() const {
  std::uint64_t o = embed + cpe + mlp + head;
  for (const auto& l : layers) o += l.projections + l.rate_projection;
  return o;
}

std::uint64_t FlopsReport::inner() const {
  std::uint64_t i = 0;
  for (const auto& l : layers) i += l.inner_executed;
  return i;
}

FlopsReport flops_estimate(const ModelConfig& cfg) {
  cfg.validate();
  const Grid grid = cfg.grid();
  const std::uint64_t n = grid.tokens(), c = cfg.channels;
  const std::uint64_t in = cfg.input == InputKind::image ? cfg.patch * cfg.patch * cfg.in_channels : cfg.token_dim;
  FlopsReport r;
  r.embed = n * in * c;
  r.cpe = cfg.depth * conv_taps(grid) * c;
  r.mlp = cfg.depth * 2 * n * c * (cfg.mlp_ratio * c);
  r.head = c * cfg.classes;
  const auto layer = cfg.layer();
  for (std::size_t i = 0; i < cfg.depth; ++i) r.layers.push_back(ttt_layer_flops(layer, n, grid));
  return r;
}

}  // namespace ttt
