#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

#include "ttt/attention.hpp"

namespace {

using namespace ttt;

struct Fixture {
  TTTLayerConfig cfg;
  NamedTensors params;
  Tensor x;
  Grid grid;

  explicit Fixture(std::size_t n) {
    cfg.channels = 32;
    cfg.heads = 2;
    cfg.head_models = uniform_heads(2, inner::Spec{inner::Kind::fc});
    std::mt19937_64 rng(0);
    init_ttt_layer(params, "l", cfg, rng);
    std::size_t h = static_cast<std::size_t>(std::sqrt(double(n)));
    while (n % h) --h;
    grid = {h, n / h};
    x = Tensor({n, cfg.channels});
    std::normal_distribution<double> nd;
    for (auto& e : x.data()) e = nd(rng);
  }
};

void BM_TTT(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(ttt_attention(f.params, "l", f.x, f.grid, f.cfg));
  state.SetComplexityN(state.range(0));
}

void BM_Softmax(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(softmax_attention(f.params, "l", f.x, f.cfg));
  state.SetComplexityN(state.range(0));
}

}  // namespace

BENCHMARK(BM_TTT)->RangeMultiplier(2)->Range(256, 8192)->Unit(benchmark::kMillisecond)->Complexity(benchmark::oN);
BENCHMARK(BM_Softmax)->RangeMultiplier(2)->Range(256, 4096)->Unit(benchmark::kMillisecond)->Complexity(benchmark::oNSquared);
BENCHMARK_MAIN();
