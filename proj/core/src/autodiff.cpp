#include "ttt/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace ttt::ad {

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ContractError("variable is not attached to a tape");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands live on different tapes");
  return tape_of(a);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                         " differ");
  }
}

template <typename Fn>
Tensor map(const Tensor& a, Fn fn) {
  Tensor out = a;
  for (auto& v : out.data()) v = fn(v);
  return out;
}

template <typename Fn>
Tensor zip(const Tensor& a, const Tensor& b, Fn fn) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(a[i], b[i]);
  return out;
}

}  // namespace

const Tensor& Var::value() const { return tape_of(*this).value(id); }

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::mul_scalar: return "mul_scalar";
    case OpKind::row_scale: return "row_scale";
    case OpKind::add_bias: return "add_bias";
    case OpKind::silu: return "silu";
    case OpKind::silu_prime: return "silu_prime";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::sign: return "sign";
    case OpKind::clip_unit: return "clip_unit";
    case OpKind::sqrt: return "sqrt";
    case OpKind::clamp_min: return "clamp_min";
    case OpKind::sum: return "sum";
    case OpKind::mean_rows: return "mean_rows";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::conv: return "conv3x3";
    case OpKind::conv_input_grad: return "conv3x3_input_grad";
    case OpKind::conv_kernel_grad: return "conv3x3_kernel_grad";
    case OpKind::l2_normalize_rows: return "l2_normalize_rows";
    case OpKind::reciprocal: return "reciprocal";
    case OpKind::pad_rows: return "pad_rows";
  }
  return "?";
}

// ---------------------------------------------------------------------------

Var Tape::leaf(Tensor value) {
  nodes_.push_back({OpKind::leaf, std::move(value), {}, nullptr, true});
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back({OpKind::constant, std::move(value), {}, nullptr, false});
  return {this, nodes_.size() - 1};
}

Var Tape::push(OpKind kind, Tensor value, std::vector<std::size_t> inputs, Backward backward) {
  check_finite(value, op_name(kind));
  bool needs = false;
  for (auto i : inputs) needs = needs || nodes_[i].needs_grad;
  if (!record_ || !needs) backward = nullptr;
  nodes_.push_back({kind, std::move(value), std::move(inputs), std::move(backward), needs});
  return {this, nodes_.size() - 1};
}

Gradients Tape::backward(Var root) const {
  if (root.tape != this) throw ContractError("backward: root belongs to another tape");
  if (!record_) throw ContractError("backward: tape was built without recording");
  if (nodes_[root.id].value.size() != 1) {
    throw ContractError("backward: root must be a scalar, got " + shape_string(nodes_[root.id].value.shape()));
  }
  Gradients grads(*this);
  grads.accumulate(root.id, Tensor::full(nodes_[root.id].value.shape(), 1.0));
  for (std::size_t i = root.id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::leaf || n.kind == OpKind::constant || !grads.touched(i)) continue;
    Tensor g = grads.take(i);
    if (n.backward) n.backward(*this, g, grads);
  }
  return grads;
}

void Gradients::accumulate(std::size_t id, const Tensor& g) {
  if (!tape_->needs_grad(id)) return;
  const Tensor& v = tape_->value(id);
  if (g.size() != v.size()) throw ContractError("gradient shape mismatch");
  Tensor& dst = grads_[id];
  if (dst.empty()) {
    dst = g.reshaped(v.shape());
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

void Gradients::accumulate(std::size_t id, Tensor&& g) {
  if (!tape_->needs_grad(id)) return;
  Tensor& dst = grads_[id];
  if (dst.empty()) {
    const Tensor& v = tape_->value(id);
    if (g.size() != v.size()) throw ContractError("gradient shape mismatch");
    dst = g.shape() == v.shape() ? std::move(g) : g.reshaped(v.shape());
    return;
  }
  accumulate(id, static_cast<const Tensor&>(g));
}

Tensor Gradients::operator[](Var v) const {
  if (grads_[v.id].empty()) return Tensor::zeros(tape_->value(v.id).shape());
  return grads_[v.id];
}

Tensor Gradients::take(std::size_t id) {
  Tensor t = std::move(grads_[id]);
  grads_[id] = Tensor();
  return t;
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.push(OpKind::matmul, ttt::matmul(a.value(), b.value()), {a.id, b.id},
                [ia = a.id, ib = b.id](const Tape& tp, const Tensor& g, Gradients& gr) {
                  if (gr.wants(ia)) gr.accumulate(ia, ttt::matmul(g, ttt::transpose(tp.value(ib))));
                  if (gr.wants(ib)) gr.accumulate(ib, ttt::matmul(ttt::transpose(tp.value(ia)), g));
                });
}

Var transpose(Var a) {
  return tape_of(a).push(OpKind::transpose, ttt::transpose(a.value()), {a.id},
                         [ia = a.id](const Tape&, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, ttt::transpose(g));
                         });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  return t.push(OpKind::add, ttt::add(a.value(), b.value()), {a.id, b.id},
                [ia = a.id, ib = b.id](const Tape&, const Tensor& g, Gradients& gr) {
                  gr.accumulate(ia, g);
                  gr.accumulate(ib, g);
                });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  return t.push(OpKind::sub, ttt::sub(a.value(), b.value()), {a.id, b.id},
                [ia = a.id, ib = b.id](const Tape&, const Tensor& g, Gradients& gr) {
                  gr.accumulate(ia, g);
                  gr.accumulate(ib, ttt::scale(g, -1.0));
                });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  return t.push(OpKind::mul, ttt::mul(a.value(), b.value()), {a.id, b.id},
                [ia = a.id, ib = b.id](const Tape& tp, const Tensor& g, Gradients& gr) {
                  gr.accumulate(ia, ttt::mul(g, tp.value(ib)));
                  gr.accumulate(ib, ttt::mul(g, tp.value(ia)));
                });
}

Var scale(Var a, double factor) {
  return tape_of(a).push(OpKind::scale, ttt::scale(a.value(), factor), {a.id},
                         [ia = a.id, factor](const Tape&, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, ttt::scale(g, factor));
                         });
}

Var mul_scalar(Var a, Var s) {
  Tape& t = tape_of(a, s);
  if (s.value().size() != 1) throw DimensionError("mul_scalar: scalar operand has " + shape_string(s.shape()));
  return t.push(OpKind::mul_scalar, ttt::scale(a.value(), s.value()[0]), {a.id, s.id},
                [ia = a.id, is = s.id](const Tape& tp, const Tensor& g, Gradients& gr) {
                  const double sv = tp.value(is)[0];
                  gr.accumulate(ia, ttt::scale(g, sv));
                  const Tensor& av = tp.value(ia);
                  double dot = 0.0;
                  for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * av[i];
                  gr.accumulate(is, Tensor::full(tp.value(is).shape(), dot));
                });
}

Var row_scale(Var a, Var s) {
  Tape& t = tape_of(a, s);
  const Tensor& av = a.value();
  if (av.rank() != 2 || s.value().size() != av.dim(0)) {
    throw DimensionError("row_scale: need [N x C] and [N x 1], got " + shape_string(av.shape()) + ", " +
                         shape_string(s.shape()));
  }
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out = av;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) *= s.value()[i];
  return t.push(OpKind::row_scale, std::move(out), {a.id, s.id},
                [ia = a.id, is = s.id, r, c](const Tape& tp, const Tensor& g, Gradients& gr) {
                  const Tensor& av = tp.value(ia);
                  const Tensor& sv = tp.value(is);
                  Tensor ga = g;
                  Tensor gs = Tensor::zeros(sv.shape());
                  for (std::size_t i = 0; i < r; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                      ga[i * c + j] *= sv[i];
                      acc += g[i * c + j] * av[i * c + j];
                    }
                    gs[i] = acc;
                  }
                  gr.accumulate(ia, std::move(ga));
                  gr.accumulate(is, std::move(gs));
                });
}

Var add_bias(Var a, Var bias) {
  Tape& t = tape_of(a, bias);
  const Tensor& av = a.value();
  if (av.rank() != 2 || bias.value().size() != av.dim(1)) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match " + shape_string(av.shape()));
  }
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out = av;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) += bias.value()[j];
  return t.push(OpKind::add_bias, std::move(out), {a.id, bias.id},
                [ia = a.id, ib = bias.id, r, c](const Tape& tp, const Tensor& g, Gradients& gr) {
                  Tensor gb = Tensor::zeros(tp.value(ib).shape());
                  for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                  gr.accumulate(ia, g);
                  gr.accumulate(ib, std::move(gb));
                });
}

Var silu(Var a) {
  return tape_of(a).push(OpKind::silu, ttt::silu(a.value()), {a.id},
                         [ia = a.id](const Tape& tp, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, zip(g, tp.value(ia), [](double gv, double x) { return gv * ttt::silu_prime(x); }));
                         });
}

Var silu_prime(Var a) {
  return tape_of(a).push(OpKind::silu_prime, map(a.value(), [](double x) { return ttt::silu_prime(x); }), {a.id},
                         [ia = a.id](const Tape& tp, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, zip(g, tp.value(ia), [](double gv, double x) { return gv * silu_second(x); }));
                         });
}

Var sigmoid(Var a) {
  return tape_of(a).push(OpKind::sigmoid, ttt::sigmoid(a.value()), {a.id},
                         [ia = a.id](const Tape& tp, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, zip(g, tp.value(ia), [](double gv, double x) {
                                           const double s = ttt::sigmoid(x);
                                           return gv * s * (1.0 - s);
                                         }));
                         });
}

Var sign(Var a) { return tape_of(a).push(OpKind::sign, ttt::sign(a.value()), {a.id}, nullptr); }

Var clip_unit(Var a) {
  return tape_of(a).push(OpKind::clip_unit, map(a.value(), [](double x) { return std::clamp(x, -1.0, 1.0); }), {a.id},
                         [ia = a.id](const Tape& tp, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, zip(g, tp.value(ia), [](double gv, double x) {
                                           return std::abs(x) < 1.0 ? gv : 0.0;
                                         }));
                         });
}

Var sqrt(Var a) {
  return tape_of(a).push(OpKind::sqrt, ttt::sqrt(a.value()), {a.id},
                         [ia = a.id](const Tape& tp, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, zip(g, tp.value(ia), [](double gv, double x) {
                                           return gv * 0.5 / std::sqrt(x);
                                         }));
                         });
}

Var clamp_min(Var a, double floor) {
  return tape_of(a).push(OpKind::clamp_min, map(a.value(), [floor](double x) { return std::max(x, floor); }), {a.id},
                         [ia = a.id, floor](const Tape& tp, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, zip(g, tp.value(ia), [floor](double gv, double x) {
                                           return x > floor ? gv : 0.0;
                                         }));
                         });
}

Var sum(Var a) {
  return tape_of(a).push(OpKind::sum, Tensor::scalar(ttt::sum(a.value())), {a.id},
                         [ia = a.id](const Tape& tp, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, Tensor::full(tp.value(ia).shape(), g[0]));
                         });
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw DimensionError("mean_rows: expected rank 2");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out({1, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += av.at(i, j);
  for (auto& v : out.data()) v /= static_cast<double>(r);
  return tape_of(a).push(OpKind::mean_rows, std::move(out), {a.id},
                         [ia = a.id, r, c](const Tape&, const Tensor& g, Gradients& gr) {
                           Tensor ga({r, c});
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) ga.at(i, j) = g[j] / static_cast<double>(r);
                           gr.accumulate(ia, std::move(ga));
                         });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (av.rank() != 2 || begin >= end || end > av.dim(0)) throw DimensionError("slice_rows: bad range");
  const std::size_t c = av.dim(1);
  Tensor out({end - begin, c}, std::span<const double>(av.raw() + begin * c, (end - begin) * c));
  return tape_of(a).push(OpKind::slice_rows, std::move(out), {a.id},
                         [ia = a.id, begin, c](const Tape& tp, const Tensor& g, Gradients& gr) {
                           Tensor ga = Tensor::zeros(tp.value(ia).shape());
                           std::copy(g.data().begin(), g.data().end(), ga.raw() + begin * c);
                           gr.accumulate(ia, std::move(ga));
                         });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (av.rank() != 2 || begin >= end || end > av.dim(1)) throw DimensionError("slice_cols: bad range");
  const std::size_t r = av.dim(0), c = av.dim(1), w = end - begin;
  Tensor out({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = av.at(i, begin + j);
  return tape_of(a).push(OpKind::slice_cols, std::move(out), {a.id},
                         [ia = a.id, begin, r, c, w](const Tape&, const Tensor& g, Gradients& gr) {
                           Tensor ga({r, c});
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < w; ++j) ga.at(i, begin + j) = g[i * w + j];
                           gr.accumulate(ia, std::move(ga));
                         });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: nothing to concatenate");
  Tape& t = tape_of(parts[0]);
  const std::size_t r = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids, widths;
  for (const Var& p : parts) {
    if (p.tape != &t) throw ContractError("concat_cols: operands on different tapes");
    if (p.value().rank() != 2 || p.value().dim(0) != r) throw DimensionError("concat_cols: row counts differ");
    ids.push_back(p.id);
    widths.push_back(p.value().dim(1));
    total += p.value().dim(1);
  }
  Tensor out({r, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.value().dim(1);
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.value().raw() + i * w, w, out.raw() + i * total + off);
    off += w;
  }
  return t.push(OpKind::concat_cols, std::move(out), ids,
                [ids, widths, r, total](const Tape&, const Tensor& g, Gradients& gr) {
                  std::size_t off = 0;
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    const std::size_t w = widths[p];
                    Tensor gp({r, w});
                    for (std::size_t i = 0; i < r; ++i) std::copy_n(g.raw() + i * total + off, w, gp.raw() + i * w);
                    gr.accumulate(ids[p], std::move(gp));
                    off += w;
                  }
                });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  Tensor s = ttt::softmax_rows(a.value());
  const std::size_t out_id = t.size();
  return t.push(OpKind::softmax_rows, std::move(s), {a.id},
                [ia = a.id, out_id](const Tape& tp, const Tensor& g, Gradients& gr) {
                  const Tensor& s = tp.value(out_id);
                  const std::size_t r = s.dim(0), c = s.dim(1);
                  Tensor ga({r, c});
                  for (std::size_t i = 0; i < r; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * s[i * c + j];
                    for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = s[i * c + j] * (g[i * c + j] - dot);
                  }
                  gr.accumulate(ia, std::move(ga));
                });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || gamma.value().size() != xv.dim(1) || beta.value().size() != xv.dim(1)) {
    throw DimensionError("layer_norm: affine parameters do not match " + shape_string(xv.shape()));
  }
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor out({r, c});
  Tensor xhat({r, c});
  Tensor rstd({r});
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.raw() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[i] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      xhat.at(i, j) = (row[j] - mean) * rs;
      out.at(i, j) = xhat.at(i, j) * gamma.value()[j] + beta.value()[j];
    }
  }
  return t.push(OpKind::layer_norm, std::move(out), {x.id, gamma.id, beta.id},
                [ix = x.id, ig = gamma.id, ib = beta.id, xhat = std::move(xhat), rstd = std::move(rstd), r, c](
                    const Tape& tp, const Tensor& g, Gradients& gr) {
                  const Tensor& gam = tp.value(ig);
                  Tensor gx({r, c});
                  Tensor gg = Tensor::zeros(gam.shape());
                  Tensor gb = Tensor::zeros(tp.value(ib).shape());
                  for (std::size_t i = 0; i < r; ++i) {
                    double mean_dy = 0.0, mean_dy_xhat = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                      const double gv = g[i * c + j];
                      const double xh = xhat[i * c + j];
                      gg[j] += gv * xh;
                      gb[j] += gv;
                      const double dxh = gv * gam[j];
                      mean_dy += dxh;
                      mean_dy_xhat += dxh * xh;
                    }
                    mean_dy /= static_cast<double>(c);
                    mean_dy_xhat /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                      const double dxh = g[i * c + j] * gam[j];
                      gx[i * c + j] = rstd[i] * (dxh - mean_dy - xhat[i * c + j] * mean_dy_xhat);
                    }
                  }
                  gr.accumulate(ix, std::move(gx));
                  gr.accumulate(ig, std::move(gg));
                  gr.accumulate(ib, std::move(gb));
                });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || labels.size() != lv.dim(0)) throw DimensionError("cross_entropy: one label per row required");
  const std::size_t r = lv.dim(0), c = lv.dim(1);
  Tensor probs = ttt::softmax_rows(lv);
  double loss = 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (std::size_t i = 0; i < r; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= c) throw ContractError("cross_entropy: label out of range");
    loss -= std::log(std::max(probs.at(i, static_cast<std::size_t>(lab[i])), 1e-300));
  }
  loss /= static_cast<double>(r);
  return tape_of(logits).push(OpKind::cross_entropy, Tensor::scalar(loss), {logits.id},
                              [il = logits.id, probs = std::move(probs), lab = std::move(lab), r, c](
                                  const Tape&, const Tensor& g, Gradients& gr) {
                                Tensor gl = probs;
                                for (std::size_t i = 0; i < r; ++i) gl.at(i, static_cast<std::size_t>(lab[i])) -= 1.0;
                                const double k = g[0] / static_cast<double>(r);
                                for (auto& v : gl.data()) v *= k;
                                gr.accumulate(il, std::move(gl));
                              });
}

// The three convolution primitives are mutually adjoint, so each backward
// rule is expressed with the other two.

Var conv3x3(Var x, Grid grid, Var kernel, ConvKind kind) {
  Tape& t = tape_of(x, kernel);
  return t.push(OpKind::conv, ttt::conv3x3(x.value(), grid, kernel.value(), kind), {x.id, kernel.id},
                [ix = x.id, ik = kernel.id, grid, kind](const Tape& tp, const Tensor& g, Gradients& gr) {
                  if (gr.wants(ix)) gr.accumulate(ix, ttt::conv3x3_input_grad(g, grid, tp.value(ik), kind));
                  if (gr.wants(ik)) gr.accumulate(ik, ttt::conv3x3_kernel_grad(tp.value(ix), g, grid, kind));
                });
}

Var conv3x3_input_grad(Var dy, Grid grid, Var kernel, ConvKind kind) {
  Tape& t = tape_of(dy, kernel);
  return t.push(OpKind::conv_input_grad, ttt::conv3x3_input_grad(dy.value(), grid, kernel.value(), kind),
                {dy.id, kernel.id}, [id = dy.id, ik = kernel.id, grid, kind](const Tape& tp, const Tensor& g, Gradients& gr) {
                  if (gr.wants(id)) gr.accumulate(id, ttt::conv3x3(g, grid, tp.value(ik), kind));
                  if (gr.wants(ik)) gr.accumulate(ik, ttt::conv3x3_kernel_grad(g, tp.value(id), grid, kind));
                });
}

Var conv3x3_kernel_grad(Var x, Var dy, Grid grid, ConvKind kind) {
  Tape& t = tape_of(x, dy);
  return t.push(OpKind::conv_kernel_grad, ttt::conv3x3_kernel_grad(x.value(), dy.value(), grid, kind), {x.id, dy.id},
                [ix = x.id, id = dy.id, grid, kind](const Tape& tp, const Tensor& g, Gradients& gr) {
                  if (gr.wants(ix)) gr.accumulate(ix, ttt::conv3x3_input_grad(tp.value(id), grid, g, kind));
                  if (gr.wants(id)) gr.accumulate(id, ttt::conv3x3(tp.value(ix), grid, g, kind));
                });
}

Var l2_normalize_rows(Var a, double eps) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw DimensionError("l2_normalize_rows: expected rank 2");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out = av;
  Tensor inv_norm({r});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += av.at(i, j) * av.at(i, j);
    inv_norm[i] = 1.0 / std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) *= inv_norm[i];
  }
  Tape& t = tape_of(a);
  const std::size_t out_id = t.size();
  return t.push(OpKind::l2_normalize_rows, std::move(out), {a.id},
                [ia = a.id, out_id, inv_norm = std::move(inv_norm), r, c](const Tape& tp, const Tensor& g,
                                                                          Gradients& gr) {
                  const Tensor& y = tp.value(out_id);
                  Tensor ga({r, c});
                  for (std::size_t i = 0; i < r; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                    for (std::size_t j = 0; j < c; ++j)
                      ga[i * c + j] = (g[i * c + j] - y[i * c + j] * dot) * inv_norm[i];
                  }
                  gr.accumulate(ia, std::move(ga));
                });
}

Var reciprocal(Var a) {
  return tape_of(a).push(OpKind::reciprocal, map(a.value(), [](double x) { return 1.0 / x; }), {a.id},
                         [ia = a.id](const Tape& tp, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, zip(g, tp.value(ia), [](double gv, double x) { return -gv / (x * x); }));
                         });
}

Var pad_rows(Var a, std::size_t begin, std::size_t total) {
  const Tensor& av = a.value();
  if (av.rank() != 2 || begin + av.dim(0) > total) throw DimensionError("pad_rows: block does not fit");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out({total, c});
  std::copy(av.data().begin(), av.data().end(), out.raw() + begin * c);
  return tape_of(a).push(OpKind::pad_rows, std::move(out), {a.id},
                         [ia = a.id, begin, r, c](const Tape&, const Tensor& g, Gradients& gr) {
                           gr.accumulate(ia, Tensor({r, c}, std::span<const double>(g.raw() + begin * c, r * c)));
                         });
}

// ---------------------------------------------------------------------------

std::vector<Tensor> gradients(const TapeFunction& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p));
  Var root = f(tape, leaves);
  Gradients g = tape.backward(root);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Var& l : leaves) out.push_back(g[l]);
  return out;
}

namespace {

double evaluate(const TapeFunction& f, const std::vector<Tensor>& params) {
  Tape tape(false);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p));
  const Tensor& v = f(tape, leaves).value();
  if (v.size() != 1) throw ContractError("gradcheck: function must return a scalar");
  return v[0];
}

}  // namespace

GradcheckResult gradcheck(const TapeFunction& f, const std::vector<Tensor>& params, double eps) {
  const double base = evaluate(f, params);
  if (evaluate(f, params) != base) throw OracleError("gradcheck: function is not deterministic");
  const std::vector<Tensor> analytic = gradients(f, params);

  GradcheckResult res;
  res.per_param.assign(params.size(), 0.0);
  std::vector<Tensor> work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = work[p][i];
      work[p][i] = orig + eps;
      const double up = evaluate(f, work);
      work[p][i] = orig - eps;
      const double down = evaluate(f, work);
      work[p][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      res.per_param[p] = std::max(res.per_param[p], err);
      if (err > res.max_rel_error || (p == 0 && i == 0)) {
        res.max_rel_error = std::max(res.max_rel_error, err);
        res.worst_param = p;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace ttt::ad
