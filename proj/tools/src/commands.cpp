#include <algorithm>
#include <chrono>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <tuple>

#include "ttt/harness.hpp"

namespace ttt::harness {

using nlohmann::json;

TrainReport train_run(const ModelConfig& model, const TrainerConfig& trainer, const TaskData& data,
                      std::uint64_t seed, const std::function<void(const EpochStats&)>& on_epoch) {
  TrainerConfig tc = trainer;
  tc.seed = seed;
  tc.transform = data.transform;
  Trainer t(model, tc, init_model(model, seed));
  TrainReport r;
  for (std::size_t e = 0; e < tc.epochs; ++e) {
    try {
      const EpochStats st = t.run_epoch(data.train, data.val);
      r.epochs.push_back(st);
      r.best_val_acc = std::max(r.best_val_acc, st.val_acc);
      if (on_epoch) on_epoch(st);
    } catch (const DivergenceError& err) {
      r.diverged = true;
      r.divergence = err.what();
      break;
    }
  }
  r.params = t.params();
  return r;
}

int cmd_train(const RunConfig& cfg, std::ostream& log) {
  ModelConfig model = cfg.model;
  const TaskData data = load_task(cfg.task, cfg.seed, model);
  TrainerConfig tc = cfg.trainer;
  tc.threads = cfg.threads;
  CsvWriter csv(cfg.out + "/train.csv", {"epoch", "train_loss", "val_acc", "wall_s"});
  log << "train: " << data.train.size() << " samples, " << parameter_count(init_model(model, cfg.seed))
      << " parameters, heads " << heads_label(model) << '\n';
  const auto report = train_run(model, tc, data, cfg.seed, [&](const EpochStats& st) {
    csv.row({std::to_string(st.epoch), fmt(st.train_loss, 8), fmt(st.val_acc, 6), fmt(st.wall_s, 4)});
    log << "epoch " << st.epoch << "  loss " << fmt(st.train_loss) << "  val_acc " << fmt(st.val_acc) << "  "
        << fmt(st.wall_s, 3) << " s\n";
  });
  save_checkpoint(cfg.out + "/checkpoint", report.params);
  json extra;
  extra["outputs"] = {"train.csv", "checkpoint.bin", "checkpoint.json"};
  extra["diverged"] = report.diverged;
  extra["best_val_acc"] = report.best_val_acc;
  if (report.diverged) extra["divergence"] = report.divergence;
  write_manifest(cfg.out, cfg, extra);
  if (report.diverged) {
    log << "diverged: " << report.divergence << '\n';
    return 3;
  }
  return 0;
}

// ---------------------------------------------------------------------------

std::string AblateCell::label() const {
  ModelConfig m;
  m.head_models = heads;
  std::string s = heads_label(m) + "/" + inner::to_string(inner.loss) + "/lr=" + lr_label(inner.lr) +
                  "/ep=" + std::to_string(inner.epochs);
  if (inner.partition.parts > 1) s += "/mb=" + std::to_string(inner.partition.parts);
  return s;
}

std::vector<AblateCell> expand_grid(const AblateGrid& g) {
  std::vector<AblateCell> cells;
  for (const auto& heads : g.models)
    for (auto loss : g.losses)
      for (const auto& lr : g.lrs)
        for (auto ep : g.epochs)
          for (auto parts : g.parts)
            for (auto seed : g.seeds) {
              AblateCell c;
              c.heads = heads;
              c.inner = {loss, ep, inner::Partition::sequential(parts), lr};
              c.seed = seed;
              cells.push_back(c);
            }
  return cells;
}

AblateRow run_cell(const RunConfig& cfg, const AblateCell& cell) {
  AblateRow row;
  row.cell = cell;
  try {
    ModelConfig model = cfg.model;
    model.head_models = cell.heads;
    model.inner = cell.inner;
    const TaskData data = load_task(cfg.task, cell.seed, model);
    model.validate();
    row.params = parameter_count(init_model(model, cell.seed));
    row.flops = flops_estimate(model).total();
    TrainerConfig tc = cfg.trainer;
    tc.threads = 1;
    const auto t0 = std::chrono::steady_clock::now();
    const auto report = train_run(model, tc, data, cell.seed);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double tokens = static_cast<double>(data.train.size() * model.tokens() * report.epochs.size());
    row.throughput = wall > 0 ? tokens / wall : 0.0;
    row.diverged = report.diverged;
    row.error = report.divergence;
    // diverged cells report the best accuracy reached before divergence
    row.metric = report.diverged ? report.best_val_acc
                                 : (report.epochs.empty() ? 0.0 : report.epochs.back().val_acc);
    row.final_loss = report.epochs.empty() ? 0.0 : report.epochs.back().train_loss;
  } catch (const Error& e) {
    row.diverged = true;
    row.error = e.what();
  }
  return row;
}

std::vector<AblateRow> run_ablation(const RunConfig& cfg, const std::function<void(const AblateRow&)>& on_row) {
  const auto cells = expand_grid(cfg.ablate);
  std::vector<AblateRow> rows(cells.size());
  std::vector<char> done(cells.size(), 0);
  std::size_t flushed = 0;
  std::mutex mu;
  parallel_for(cells.size(), cfg.threads, [&](std::size_t i) {
    AblateRow r = run_cell(cfg, cells[i]);
    std::lock_guard lock(mu);
    rows[i] = std::move(r);
    done[i] = 1;
    // rows leave in grid order whatever the completion order
    while (flushed < cells.size() && done[flushed]) {
      if (on_row) on_row(rows[flushed]);
      ++flushed;
    }
  });
  return rows;
}

std::vector<Ordering> directional_checks(const std::vector<AblateRow>& rows) {
  using inner::Loss;
  // (heads label, inner epochs, parts, seed) -> loss -> lr label -> metric
  using Key = std::tuple<std::string, std::size_t, std::size_t, std::uint64_t>;
  std::map<Key, std::map<Loss, std::map<std::string, double>>> table;
  for (const auto& r : rows) {
    if (!r.error.empty() && !r.diverged) continue;
    ModelConfig m;
    m.head_models = r.cell.heads;
    const Key k{heads_label(m), r.cell.inner.epochs, r.cell.inner.partition.parts, r.cell.seed};
    table[k][r.cell.inner.loss][lr_label(r.cell.inner.lr)] = r.metric;
  }
  std::map<std::string, Ordering> out;
  auto tally = [&](const std::string& claim, bool ok) {
    auto& o = out[claim];
    o.claim = claim;
    ++o.seeds;
    o.agree += ok;
  };
  for (const auto& [key, by_loss] : table) {
    auto at = [&](Loss l, const std::string& lr) -> std::optional<double> {
      auto it = by_loss.find(l);
      if (it == by_loss.end()) return std::nullopt;
      auto jt = it->second.find(lr);
      if (jt == it->second.end()) return std::nullopt;
      return jt->second;
    };
    const auto mae = at(Loss::mae, "1");
    for (Loss l : {Loss::mse, Loss::dot_product}) {
      const auto v = at(l, "1");
      if (v && mae) tally(inner::to_string(l) + " > mae (lr 1)", *v > *mae);
      const auto lo = at(l, "0.1");
      if (v && lo) tally(inner::to_string(l) + ": lr 1 >= lr 0.1", *v >= *lo);
    }
  }
  std::vector<Ordering> v;
  for (auto& [k, o] : out) v.push_back(o);
  return v;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& log) {
  CsvWriter csv(cfg.out + "/ablate.csv", {"config", "heads", "loss", "lr", "inner_epochs", "parts", "seed", "params",
                                          "flops", "throughput_tok_s", "metric", "final_loss"});
  const auto total = expand_grid(cfg.ablate).size();
  log << "ablate: " << total << " cells on " << cfg.threads << " worker(s)\n";
  const auto rows = run_ablation(cfg, [&](const AblateRow& r) {
    ModelConfig m;
    m.head_models = r.cell.heads;
    const std::string metric = fmt(r.metric, 4) + (r.diverged ? "*" : "");
    csv.row({r.cell.label(), heads_label(m), inner::to_string(r.cell.inner.loss), lr_label(r.cell.inner.lr),
             std::to_string(r.cell.inner.epochs), std::to_string(r.cell.inner.partition.parts),
             std::to_string(r.cell.seed), std::to_string(r.params), std::to_string(r.flops), fmt(r.throughput, 6),
             metric, fmt(r.final_loss, 6)});
    log << r.cell.label() << " seed " << r.cell.seed << "  metric " << metric << '\n';
  });
  json extra;
  extra["outputs"] = {"ablate.csv"};
  json checks = json::array();
  for (const auto& o : directional_checks(rows)) {
    log << "ordering " << o.claim << ": " << o.agree << "/" << o.seeds << (o.holds() ? " holds" : " fails") << '\n';
    checks.push_back({{"claim", o.claim}, {"agree", o.agree}, {"seeds", o.seeds}, {"holds", o.holds()}});
  }
  extra["orderings"] = checks;
  std::size_t diverged = 0;
  for (const auto& r : rows) diverged += r.diverged;
  extra["diverged_cells"] = diverged;
  write_manifest(cfg.out, cfg, extra);
  return 0;
}

}  // namespace ttt::harness
