#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "ttt/harness.hpp"

namespace ttt::harness {

Grid bench_grid(std::size_t tokens) {
  std::size_t h = static_cast<std::size_t>(std::sqrt(static_cast<double>(tokens)));
  while (h > 1 && tokens % h != 0) --h;
  return {h, tokens / h};
}

double loglog_slope(const std::vector<std::size_t>& n, const std::vector<double>& t) {
  const std::size_t m = std::min(n.size(), t.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double x = std::log(static_cast<double>(n[i])), y = std::log(t[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double den = static_cast<double>(m) * sxx - sx * sx;
  return den == 0.0 ? 0.0 : (static_cast<double>(m) * sxy - sx * sy) / den;
}

namespace {

template <typename Fn>
BenchRow measure(const std::string& layer, std::size_t n, std::size_t warmup, std::size_t reps, Fn&& fn) {
  BenchRow row;
  row.layer = layer;
  row.tokens = n;
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> ms;
  for (std::size_t i = 0; i < reps; ++i) {
    const std::size_t live = memory_probe().live_bytes;
    memory_probe_reset();
    const std::uint64_t macs = mac_counter();
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    const auto probe = memory_probe();
    row.peak_bytes = std::max(row.peak_bytes, probe.peak_bytes - live);
    row.largest_allocation = std::max(row.largest_allocation, probe.largest_allocation_bytes);
    row.counted_macs = mac_counter() - macs;
  }
  row.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  row.p50_ms = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
  return row;
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchConfig& cfg, std::uint64_t seed,
                                const std::function<void(const BenchRow&)>& on_row) {
  if (cfg.reps == 0) throw ConfigError("bench needs at least one measured repetition");
  TTTLayerConfig layer;
  layer.channels = cfg.channels;
  layer.heads = cfg.heads;
  layer.head_models = uniform_heads(cfg.heads, cfg.model);
  layer.train = {inner::Loss::mse, 1, inner::Partition::full_batch(), inner::LearningRate::fixed(1.0)};
  std::mt19937_64 rng(seed);
  NamedTensors params;
  init_ttt_layer(params, "attn", layer, rng);
  std::vector<BenchRow> rows;
  for (std::size_t n : cfg.tokens) {
    const Grid grid = bench_grid(n);
    Tensor x({n, cfg.channels});
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& v : x.data()) v = u(rng);
    const LayerFlops f = ttt_layer_flops(layer, n, grid);

    BenchRow t = measure("ttt", n, cfg.warmup, cfg.reps, [&] { (void)ttt_attention(params, "attn", x, grid, layer); });
    t.flops = f.ttt_total();
    rows.push_back(t);
    if (on_row) on_row(t);

    BenchRow s = measure("softmax", n, cfg.warmup, cfg.reps, [&] { (void)softmax_attention(params, "attn", x, layer); });
    s.flops = f.softmax_total();
    rows.push_back(s);
    if (on_row) on_row(s);
  }
  return rows;
}

int cmd_bench(const RunConfig& cfg, std::ostream& log) {
  CsvWriter csv(cfg.out + "/bench.csv", {"layer", "N", "mean_ms", "p50_ms", "peak_bytes", "flops"});
  log << "bench: C=" << cfg.bench.channels << " H=" << cfg.bench.heads << " inner " << inner::to_string(cfg.bench.model)
      << ", " << cfg.bench.warmup << " warmup + " << cfg.bench.reps << " reps\n";
  const auto rows = run_bench(cfg.bench, cfg.seed, [&](const BenchRow& r) {
    csv.row({r.layer, std::to_string(r.tokens), fmt(r.mean_ms, 6), fmt(r.p50_ms, 6), std::to_string(r.peak_bytes),
             std::to_string(r.flops)});
    log << r.layer << "  N=" << r.tokens << "  p50 " << fmt(r.p50_ms, 4) << " ms  peak " << r.peak_bytes << " B\n";
  });
  std::vector<std::size_t> n;
  std::vector<double> ttt, sm;
  for (const auto& r : rows) {
    if (r.layer == "ttt") {
      n.push_back(r.tokens);
      ttt.push_back(r.p50_ms);
    } else {
      sm.push_back(r.p50_ms);
    }
  }
  const double st = loglog_slope(n, ttt), ss = loglog_slope(n, sm);
  log << "log-log slope: ttt " << fmt(st, 3) << ", softmax " << fmt(ss, 3) << '\n';
  write_manifest(cfg.out, cfg, {{"outputs", {"bench.csv"}}, {"slope_ttt", st}, {"slope_softmax", ss}});
  return 0;
}

}  // namespace ttt::harness
