#include <cmath>
#include <mutex>
#include <random>

#include "ttt/harness.hpp"

namespace ttt::harness {

using inner::Loss;
using nlohmann::json;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

std::string GradcheckCell::name() const {
  return inner::to_string(model) + "/" + inner::to_string(loss) + "/" +
         (lr_mode == inner::LearningRate::Mode::fixed ? "fixed" : "dynamic") + "/" +
         (parts == 1 ? std::string("full") : "mb" + std::to_string(parts));
}

GradcheckCell gradcheck_cell(const inner::Spec& model, Loss loss, inner::LearningRate::Mode mode, std::size_t parts,
                             const GradcheckOptions& opt) {
  GradcheckCell cell;
  cell.model = model;
  cell.loss = loss;
  cell.lr_mode = mode;
  cell.parts = parts;

  TTTLayerConfig layer;
  layer.channels = opt.channels;
  layer.heads = opt.heads;
  layer.head_models = uniform_heads(opt.heads, model);
  layer.train = {loss, opt.epochs, inner::Partition::sequential(parts), {mode, 1.0}};

  std::mt19937_64 rng(opt.seed);
  NamedTensors named;
  init_ttt_layer(named, "attn", layer, rng);
  const std::size_t n = opt.grid.tokens();
  const Tensor x = random_tensor({n, opt.channels}, rng);
  const Tensor r = random_tensor({n, opt.channels}, rng);

  std::vector<std::string> names{"x"};
  std::vector<Tensor> params{x};
  for (const auto& [name, t] : named) {
    names.push_back(name);
    params.push_back(t);
  }
  const Grid grid = opt.grid;
  ad::TapeFunction f = [&](ad::Tape& tape, std::span<const ad::Var> leaves) {
    NamedTensors none;
    Binder bind(tape, none);
    for (std::size_t i = 1; i < leaves.size(); ++i) bind.bind(names[i], leaves[i]);
    ad::Var out = ttt_attention(bind, "attn", leaves[0], grid, layer);
    return ad::sum(ad::mul(out, tape.constant(r)));
  };

  if (opt.fault) inner::inject_backward_sign_fault(opt.fault);
  try {
    const auto res = ad::gradcheck(f, params, opt.eps);
    const auto grads = ad::gradients(f, params);
    if (opt.fault) inner::inject_backward_sign_fault(std::nullopt);
    cell.max_rel_error = res.max_rel_error;
    cell.worst_param = names[res.worst_param];
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i].rfind("attn.wv.", 0) == 0) cell.wv_grad = std::max(cell.wv_grad, max_abs(grads[i]));
    }
    cell.pass = res.max_rel_error < opt.tolerance;
  } catch (...) {
    if (opt.fault) inner::inject_backward_sign_fault(std::nullopt);
    throw;
  }
  return cell;
}

std::vector<GradcheckCell> gradcheck_matrix(const GradcheckOptions& opt) {
  struct Spec {
    inner::Spec model;
    Loss loss;
    inner::LearningRate::Mode mode;
    std::size_t parts;
  };
  std::vector<Spec> specs;
  for (auto kind : inner::kAllKinds)
    for (auto loss : inner::kAllLosses)
      for (auto mode : {inner::LearningRate::Mode::fixed, inner::LearningRate::Mode::dynamic})
        for (std::size_t parts : {std::size_t{1}, std::size_t{2}}) specs.push_back({{kind}, loss, mode, parts});
  std::vector<GradcheckCell> cells(specs.size());
  // the fault switch is global, so injected runs stay on one thread
  parallel_for(specs.size(), opt.fault ? 1 : opt.threads, [&](std::size_t i) {
    GradcheckOptions o = opt;
    o.seed = opt.seed * 1000 + i;
    cells[i] = gradcheck_cell(specs[i].model, specs[i].loss, specs[i].mode, specs[i].parts, o);
  });
  return cells;
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& log, std::optional<Loss> fault) {
  GradcheckOptions opt;
  opt.seed = cfg.seed;
  opt.threads = cfg.threads;
  opt.fault = fault;
  const auto cells = gradcheck_matrix(opt);
  CsvWriter csv(cfg.out + "/gradcheck.csv", {"cell", "max_rel_error", "worst_param", "wv_grad_max", "pass"});
  std::size_t failed = 0;
  double worst = 0.0;
  for (const auto& c : cells) {
    csv.row({c.name(), fmt(c.max_rel_error, 4), c.worst_param, fmt(c.wv_grad, 4), c.pass ? "1" : "0"});
    worst = std::max(worst, c.max_rel_error);
    std::string note;
    if (c.loss == Loss::mae) note = c.wv_grad == 0.0 ? "  [info: dL/dW_V = 0 through the inner path]" : "";
    log << (c.pass ? "ok    " : "FAIL  ") << c.name() << "  max rel err " << fmt(c.max_rel_error, 3) << note << '\n';
    if (!c.pass) ++failed;
  }
  log << cells.size() - failed << "/" << cells.size() << " cells pass, worst " << fmt(worst, 3) << '\n';
  if (failed) {
    log << "failing cells:";
    for (const auto& c : cells)
      if (!c.pass) log << ' ' << c.name();
    log << '\n';
  }
  write_manifest(cfg.out, cfg,
                 {{"outputs", {"gradcheck.csv"}}, {"cells", cells.size()}, {"failed", failed}, {"worst", worst},
                  {"fault", fault ? inner::to_string(*fault) : "none"}});
  return failed ? 1 : 0;
}

// ---------------------------------------------------------------------------

std::vector<LossReportRow> loss_report(std::uint64_t seed, std::size_t rows, std::size_t dim, double eps,
                                       double tolerance) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor vhat({rows, dim}), v({rows, dim});
  for (std::size_t i = 0; i < vhat.size(); ++i) {
    // keep every residual clear of the |x| = 0 and |x| = 1 kinks
    for (;;) {
      vhat[i] = g(rng);
      v[i] = g(rng);
      const double d = std::abs(vhat[i] - v[i]);
      if (d > 1e-2 && std::abs(d - 1.0) > 1e-2) break;
    }
  }
  const double k = 1.0 / (static_cast<double>(rows) * std::sqrt(static_cast<double>(dim)));
  std::vector<LossReportRow> out;
  for (Loss loss : inner::kAllLosses) {
    LossReportRow row;
    row.loss = loss;
    const Tensor closed = inner::mixed_second_derivative(loss, vhat, v);
    for (std::size_t i = 0; i < v.size(); ++i) {
      Tensor vp = v, vm = v;
      vp[i] += eps;
      vm[i] -= eps;
      const double num = (inner::inner_loss_grad(loss, vhat, vp)[i] - inner::inner_loss_grad(loss, vhat, vm)[i]) / (2 * eps);
      row.max_abs_error = std::max(row.max_abs_error, std::abs(num - closed[i]));
      if (i == 0) {
        row.closed_form = closed[i];
        row.numeric = num;
      }
    }
    bool law_ok = true;
    switch (loss) {
      case Loss::dot_product:
      case Loss::mse:
        row.law = "-1/(B sqrt d) everywhere";
        for (double c : closed.data()) law_ok = law_ok && std::abs(c + k) < 1e-15;
        break;
      case Loss::mae:
        row.law = "0 almost everywhere";
        for (double c : closed.data()) law_ok = law_ok && c == 0.0;
        break;
      case Loss::smooth_l1:
        row.law = "-1/(B sqrt d) if |diff| < 1 else 0";
        for (std::size_t i = 0; i < closed.size(); ++i) {
          const double want = std::abs(vhat[i] - v[i]) < 1.0 ? -k : 0.0;
          law_ok = law_ok && std::abs(closed[i] - want) < 1e-15;
        }
        break;
      case Loss::rmse: {
        row.law = "-1/(B sqrt d sqrt S) + diff^2/(B^2 d S^1.5)";
        double s = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) s += (vhat[i] - v[i]) * (vhat[i] - v[i]);
        s *= k;
        for (std::size_t i = 0; i < closed.size(); ++i) {
          const double diff = vhat[i] - v[i];
          const double want = -k / std::sqrt(s) + diff * diff / (static_cast<double>(rows * rows * dim) * std::pow(s, 1.5));
          law_ok = law_ok && std::abs(closed[i] - want) < 1e-12;
        }
        break;
      }
    }
    row.pass = law_ok && row.max_abs_error < tolerance;
    out.push_back(row);
  }
  return out;
}

int cmd_lossreport(const RunConfig& cfg, std::ostream& log) {
  const auto rows = loss_report(cfg.seed, 8, 4, 1e-5, 1e-5);
  CsvWriter csv(cfg.out + "/lossreport.csv", {"loss", "closed_form", "numeric", "max_abs_error", "law", "pass"});
  bool ok = true;
  log << "loss         closed_form    numeric        max_abs_err  law\n";
  for (const auto& r : rows) {
    csv.row({inner::to_string(r.loss), fmt(r.closed_form, 10), fmt(r.numeric, 10), fmt(r.max_abs_error, 3), r.law,
             r.pass ? "1" : "0"});
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %-14.8g %-14.8g %-12.3g %s%s\n", inner::to_string(r.loss).c_str(),
                  r.closed_form, r.numeric, r.max_abs_error, r.law.c_str(), r.pass ? "" : "  MISMATCH");
    log << line;
    ok = ok && r.pass;
  }
  write_manifest(cfg.out, cfg, {{"outputs", {"lossreport.csv"}}, {"pass", ok}});
  return ok ? 0 : 1;
}

}  // namespace ttt::harness
