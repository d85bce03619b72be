#include "ttt/inner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace ttt::inner {

namespace {

double norm_factor(std::size_t rows, std::size_t dim) {
  return 1.0 / (static_cast<double>(rows) * std::sqrt(static_cast<double>(dim)));
}

void require_pair(const Tensor& vhat, const Tensor& v, const char* op) {
  if (vhat.shape() != v.shape() || vhat.rank() != 2) {
    throw DimensionError(std::string(op) + ": prediction " + shape_string(vhat.shape()) + " and target " +
                         shape_string(v.shape()) + " must be matching [B x d]");
  }
}

void require_grid(const Spec& spec, const ad::Var& x, std::optional<Grid> grid) {
  if (!spec.is_conv()) return;
  if (!grid || grid->tokens() != x.rows()) {
    throw GridError(to_string(spec.kind) + " inner model needs the " + std::to_string(x.rows()) +
                    " tokens laid out on a grid");
  }
}

ConvKind conv_kind(Kind k) { return k == Kind::dwconv3x3 ? ConvKind::depthwise : ConvKind::full; }

std::atomic<int> g_fault{-1};

ad::Var negate_backward(ad::Var a) {
  return a.tape->push(ad::OpKind::scale, a.value(), {a.id},
                      [ia = a.id](const ad::Tape&, const Tensor& g, ad::Gradients& gr) { gr.accumulate(ia, scale(g, -1.0)); });
}

ad::Var loss_grad_impl(Loss loss, ad::Var vhat, ad::Var v);

}  // namespace

std::string to_string(Kind kind) {
  switch (kind) {
    case Kind::fc: return "fc";
    case Kind::mlp: return "mlp";
    case Kind::silu_fc: return "silu_fc";
    case Kind::swiglu: return "swiglu";
    case Kind::gated_fc: return "gated_fc";
    case Kind::conv3x3: return "conv3x3";
    case Kind::dwconv3x3: return "dwconv3x3";
    case Kind::mlp_residual: return "mlp_residual";
    case Kind::mlp_w2_plus_i: return "mlp_w2_plus_i";
    case Kind::mlp_w2_init_i: return "mlp_w2_init_i";
  }
  return "?";
}

std::string to_string(const Spec& spec) {
  if (spec.kind != Kind::mlp) return to_string(spec.kind);
  return "mlp_r" + std::to_string(spec.ratio) + "_l" + std::to_string(spec.layers);
}

Kind parse_kind(const std::string& name) {
  for (Kind k : kAllKinds) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown inner model '" + name + "'");
}

Spec parse_spec(const std::string& text) {
  unsigned r = 0, l = 0;
  char tail = 0;
  if (std::sscanf(text.c_str(), "mlp_r%u_l%u%c", &r, &l, &tail) == 2) {
    if (r == 0 || l == 0) throw ConfigError("mlp ratio and depth must be positive: " + text);
    return {Kind::mlp, r, l};
  }
  return {parse_kind(text), 1, 2};
}

std::vector<Shape> weight_shapes(const Spec& spec, std::size_t d) {
  switch (spec.kind) {
    case Kind::fc:
    case Kind::silu_fc: return {{d, d}};
    case Kind::gated_fc: return {{d, d}, {d, d}};
    case Kind::swiglu: return {{d, d}, {d, d}, {d, d}};
    case Kind::conv3x3: return {{9, d, d}};
    case Kind::dwconv3x3: return {{9, d}};
    case Kind::mlp_residual:
    case Kind::mlp_w2_plus_i:
    case Kind::mlp_w2_init_i: return {{d, d}, {d, d}};
    case Kind::mlp: {
      if (spec.layers == 0 || spec.ratio == 0) throw ConfigError("mlp needs positive ratio and depth");
      if (spec.layers == 1) return {{d, d}};
      const std::size_t h = spec.ratio * d;
      std::vector<Shape> s{{d, h}};
      for (std::size_t i = 2; i < spec.layers; ++i) s.push_back({h, h});
      s.push_back({h, d});
      return s;
    }
  }
  return {};
}

std::size_t param_count(const Spec& spec, std::size_t dim) {
  std::size_t n = 0;
  for (const auto& s : weight_shapes(spec, dim)) n += shape_size(s);
  return n;
}

InnerModel init_model(const Spec& spec, std::size_t dim, std::mt19937_64& rng) {
  InnerModel m{spec, dim, {}};
  const auto shapes = weight_shapes(spec, dim);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const Shape& s = shapes[i];
    Tensor w(s);
    if (spec.kind == Kind::mlp_w2_init_i && i == 1) {
      m.weights.push_back(Tensor::identity(dim));
      continue;
    }
    std::size_t fan_in = s[0];
    if (spec.kind == Kind::dwconv3x3) fan_in = 9;
    if (spec.kind == Kind::conv3x3) fan_in = 9 * s[1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : w.data()) v = u(rng);
    m.weights.push_back(std::move(w));
  }
  return m;
}

std::string to_string(Loss loss) {
  switch (loss) {
    case Loss::dot_product: return "dot_product";
    case Loss::mse: return "mse";
    case Loss::rmse: return "rmse";
    case Loss::mae: return "mae";
    case Loss::smooth_l1: return "smooth_l1";
  }
  return "?";
}

Loss parse_loss(const std::string& name) {
  for (Loss l : kAllLosses) {
    if (to_string(l) == name) return l;
  }
  if (name == "dot") return Loss::dot_product;
  throw ConfigError("unknown inner loss '" + name + "'");
}

std::vector<Range> partition_batches(std::size_t n, Partition partition) {
  const std::size_t p = partition.parts;
  if (p == 0) throw PartitionError("partition needs at least one batch");
  if (p > n) {
    throw PartitionError("cannot split " + std::to_string(n) + " tokens into " + std::to_string(p) + " batches");
  }
  std::vector<Range> out;
  const std::size_t base = n / p, extra = n % p;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < p; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    out.push_back({begin, begin + len});
    begin += len;
  }
  return out;
}

// ---------------------------------------------------------------------------

double inner_loss(Loss loss, const Tensor& vhat, const Tensor& v) {
  require_pair(vhat, v, "inner_loss");
  const double k = norm_factor(v.dim(0), v.dim(1));
  double acc = 0.0;
  switch (loss) {
    case Loss::dot_product:
      for (std::size_t i = 0; i < v.size(); ++i) acc += vhat[i] * v[i];
      return -k * acc;
    case Loss::mse:
      for (std::size_t i = 0; i < v.size(); ++i) acc += (vhat[i] - v[i]) * (vhat[i] - v[i]);
      return 0.5 * k * acc;
    case Loss::rmse:
      for (std::size_t i = 0; i < v.size(); ++i) acc += (vhat[i] - v[i]) * (vhat[i] - v[i]);
      return std::sqrt(k * acc);
    case Loss::mae:
      for (std::size_t i = 0; i < v.size(); ++i) acc += std::abs(vhat[i] - v[i]);
      return k * acc;
    case Loss::smooth_l1:
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double x = vhat[i] - v[i];
        acc += std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
      }
      return k * acc;
  }
  return 0.0;
}

Tensor inner_loss_grad(Loss loss, const Tensor& vhat, const Tensor& v) {
  require_pair(vhat, v, "inner_loss_grad");
  ad::Tape tape(false);
  return loss_grad(loss, tape.constant(vhat), tape.constant(v)).value();
}

Tensor mixed_second_derivative(Loss loss, const Tensor& vhat, const Tensor& v) {
  require_pair(vhat, v, "mixed_second_derivative");
  const std::size_t b = v.dim(0), d = v.dim(1);
  const double k = norm_factor(b, d);
  Tensor out(v.shape());
  switch (loss) {
    case Loss::dot_product:
    case Loss::mse:
      for (auto& x : out.data()) x = -k;
      break;
    case Loss::rmse: {
      double sq = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) sq += (vhat[i] - v[i]) * (vhat[i] - v[i]);
      const double s = std::max(k * sq, kRmseFloor);
      const double bd = static_cast<double>(b) * static_cast<double>(b) * static_cast<double>(d);
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double diff = vhat[i] - v[i];
        out[i] = -k / std::sqrt(s) + diff * diff / (bd * std::pow(s, 1.5));
      }
      break;
    }
    case Loss::mae:
      // Zero wherever the sign is locally constant.
      break;
    case Loss::smooth_l1:
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::abs(vhat[i] - v[i]) < 1.0 ? -k : 0.0;
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------

void inject_backward_sign_fault(std::optional<Loss> loss) { g_fault = loss ? static_cast<int>(*loss) : -1; }

ad::Var loss_grad(Loss loss, ad::Var vhat, ad::Var v) {
  ad::Var g = loss_grad_impl(loss, vhat, v);
  return g_fault == static_cast<int>(loss) ? negate_backward(g) : g;
}

namespace {

ad::Var loss_grad_impl(Loss loss, ad::Var vhat, ad::Var v) {
  require_pair(vhat.value(), v.value(), "loss_grad");
  const double k = norm_factor(v.rows(), v.cols());
  switch (loss) {
    case Loss::dot_product: return ad::scale(v, -k);
    case Loss::mse: return ad::scale(ad::sub(vhat, v), k);
    case Loss::rmse: {
      ad::Var diff = ad::sub(vhat, v);
      ad::Var s = ad::clamp_min(ad::scale(ad::sum(ad::mul(diff, diff)), k), kRmseFloor);
      return ad::mul_scalar(ad::scale(diff, k), ad::reciprocal(ad::sqrt(s)));
    }
    case Loss::mae: return ad::scale(ad::sign(ad::sub(vhat, v)), k);
    case Loss::smooth_l1: return ad::scale(ad::clip_unit(ad::sub(vhat, v)), k);
  }
  throw ContractError("loss_grad: unknown loss");
}

}  // namespace

Trace forward(const Spec& spec, std::span<const ad::Var> w, ad::Var x, std::optional<Grid> grid) {
  require_grid(spec, x, grid);
  if (w.size() != weight_shapes(spec, x.cols()).size()) throw ContractError("inner forward: wrong weight count");
  using namespace ad;
  switch (spec.kind) {
    case Kind::fc: return {matmul(x, w[0]), {}};
    case Kind::silu_fc: {
      Var z = matmul(x, w[0]);
      return {silu(z), {z}};
    }
    case Kind::gated_fc: {
      Var a = matmul(x, w[0]);
      Var z = matmul(x, w[1]);
      Var gate = silu(z);
      return {mul(a, gate), {a, z, gate}};
    }
    case Kind::swiglu: {
      Var z1 = matmul(x, w[0]);
      Var a = silu(z1);
      Var b = matmul(x, w[1]);
      Var h = mul(a, b);
      return {matmul(h, w[2]), {z1, a, b, h}};
    }
    case Kind::conv3x3:
    case Kind::dwconv3x3: return {conv3x3(x, *grid, w[0], conv_kind(spec.kind)), {}};
    case Kind::mlp_residual: {
      Var z = matmul(x, w[0]);
      Var h = silu(z);
      return {add(matmul(h, w[1]), x), {z, h}};
    }
    case Kind::mlp_w2_plus_i: {
      Var z = matmul(x, w[0]);
      Var h = silu(z);
      Var w2i = add(w[1], x.tape->constant(Tensor::identity(w[1].rows())));
      return {matmul(h, w2i), {z, h, w2i}};
    }
    case Kind::mlp_w2_init_i:
    case Kind::mlp: {
      // saved = z_1, h_1, ..., z_{l-1}, h_{l-1}
      std::vector<Var> saved;
      Var h = x;
      for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        Var z = matmul(h, w[i]);
        h = silu(z);
        saved.push_back(z);
        saved.push_back(h);
      }
      return {matmul(h, w.back()), std::move(saved)};
    }
  }
  throw ContractError("inner forward: unknown kind");
}

std::vector<ad::Var> param_grad(const Spec& spec, std::span<const ad::Var> w, ad::Var x, const Trace& tr, ad::Var dy,
                                std::optional<Grid> grid) {
  using namespace ad;
  auto xt = [&] { return transpose(x); };
  switch (spec.kind) {
    case Kind::fc: return {matmul(xt(), dy)};
    case Kind::silu_fc: return {matmul(xt(), mul(dy, silu_prime(tr.saved[0])))};
    case Kind::gated_fc: {
      const Var& a = tr.saved[0];
      const Var& z = tr.saved[1];
      const Var& gate = tr.saved[2];
      Var x_t = xt();
      return {matmul(x_t, mul(dy, gate)), matmul(x_t, mul(mul(dy, a), silu_prime(z)))};
    }
    case Kind::swiglu: {
      const Var& z1 = tr.saved[0];
      const Var& a = tr.saved[1];
      const Var& b = tr.saved[2];
      const Var& h = tr.saved[3];
      Var g3 = matmul(transpose(h), dy);
      Var dh = matmul(dy, transpose(w[2]));
      Var x_t = xt();
      Var g1 = matmul(x_t, mul(mul(dh, b), silu_prime(z1)));
      Var g2 = matmul(x_t, mul(dh, a));
      return {g1, g2, g3};
    }
    case Kind::conv3x3:
    case Kind::dwconv3x3: return {conv3x3_kernel_grad(x, dy, *grid, conv_kind(spec.kind))};
    case Kind::mlp_residual:
    case Kind::mlp_w2_plus_i: {
      const Var& z = tr.saved[0];
      const Var& h = tr.saved[1];
      Var w2_eff = spec.kind == Kind::mlp_w2_plus_i ? tr.saved[2] : w[1];
      Var g2 = matmul(transpose(h), dy);
      Var dz = mul(matmul(dy, transpose(w2_eff)), silu_prime(z));
      return {matmul(xt(), dz), g2};
    }
    case Kind::mlp_w2_init_i:
    case Kind::mlp: {
      const std::size_t l = w.size();
      std::vector<Var> grads(l);
      Var d = dy;
      for (std::size_t i = l; i-- > 0;) {
        Var input = i == 0 ? x : tr.saved[2 * (i - 1) + 1];
        grads[i] = matmul(transpose(input), d);
        if (i > 0) d = mul(matmul(d, transpose(w[i])), silu_prime(tr.saved[2 * (i - 1)]));
      }
      return grads;
    }
  }
  throw ContractError("inner param_grad: unknown kind");
}

std::vector<ad::Var> update(const Spec& spec, std::span<const ad::Var> w0, ad::Var k, ad::Var v, const TrainConfig& cfg,
                            std::optional<ad::Var> token_lr, std::optional<Grid> grid) {
  if (k.shape() != v.shape() || k.value().rank() != 2) {
    throw DimensionError("inner update: keys " + shape_string(k.shape()) + " and values " + shape_string(v.shape()) +
                         " must be matching [N x d]");
  }
  if (cfg.epochs == 0) throw ConfigError("inner update: epochs must be >= 1");
  const bool dynamic = cfg.lr.mode == LearningRate::Mode::dynamic;
  if (dynamic && (!token_lr || token_lr->value().size() != k.rows())) {
    throw ContractError("inner update: dynamic learning rate needs one rate per token");
  }
  require_grid(spec, k, grid);
  const std::size_t n = k.rows();
  const auto ranges = partition_batches(n, cfg.partition);
  const bool full = ranges.size() == 1;

  std::vector<ad::Var> w(w0.begin(), w0.end());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t bi = 0; bi < ranges.size(); ++bi) {
      const Range r = ranges[bi];
      ad::Var dy;
      ad::Var kb = k;
      Trace tr;
      if (spec.is_conv()) {
        // Convolutional inner models see the whole key grid; the loss covers
        // the targets of the current batch only.
        tr = forward(spec, w, k, grid);
        if (full) {
          dy = loss_grad(cfg.loss, tr.out, v);
        } else {
          ad::Var g = loss_grad(cfg.loss, ad::slice_rows(tr.out, r.begin, r.end), ad::slice_rows(v, r.begin, r.end));
          dy = ad::pad_rows(g, r.begin, n);
        }
        if (dynamic) dy = ad::row_scale(dy, *token_lr);
      } else {
        ad::Var vb = v;
        if (!full) {
          kb = ad::slice_rows(k, r.begin, r.end);
          vb = ad::slice_rows(v, r.begin, r.end);
        }
        tr = forward(spec, w, kb, std::nullopt);
        dy = loss_grad(cfg.loss, tr.out, vb);
        if (dynamic) dy = ad::row_scale(dy, full ? *token_lr : ad::slice_rows(*token_lr, r.begin, r.end));
      }
      if (!dynamic) dy = ad::scale(dy, cfg.lr.eta);

      const auto grads = param_grad(spec, w, kb, tr, dy, grid);
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = ad::sub(w[i], grads[i]);
        if (!w[i].value().all_finite()) {
          std::ostringstream os;
          os << "inner weights diverged: model " << to_string(spec) << ", loss " << to_string(cfg.loss) << ", epoch "
             << epoch + 1 << ", batch " << bi + 1 << "/" << ranges.size() << ", weight " << i;
          throw DivergenceError(os.str());
        }
      }
    }
  }
  return w;
}

// ---------------------------------------------------------------------------

Tensor inner_forward(const InnerModel& model, const Tensor& x, std::optional<Grid> grid) {
  ad::Tape tape(false);
  std::vector<ad::Var> w;
  for (const auto& t : model.weights) w.push_back(tape.constant(t));
  return forward(model.spec, w, tape.constant(x), grid).out.value();
}

InnerModel inner_update(const InnerModel& model, const Tensor& k, const Tensor& v, const TrainConfig& cfg,
                        const Tensor* token_lr, std::optional<Grid> grid) {
  ad::Tape tape(false);
  std::vector<ad::Var> w;
  for (const auto& t : model.weights) w.push_back(tape.constant(t));
  std::optional<ad::Var> lr;
  if (token_lr != nullptr) lr = tape.constant(*token_lr);
  const auto out = update(model.spec, w, tape.constant(k), tape.constant(v), cfg, lr, grid);
  InnerModel res{model.spec, model.dim, {}};
  for (const auto& o : out) res.weights.push_back(o.value());
  return res;
}

}  // namespace ttt::inner
