#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ttt/harness.hpp"
#include "ttt/serialize.hpp"

using namespace ttt;
using namespace ttt::harness;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("ttt_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

RunConfig small_config() {
  RunConfig cfg = default_config();
  cfg.task.train = 120;
  cfg.task.val = 40;
  cfg.trainer.epochs = 2;
  return cfg;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("config JSON round-trips") {
    RunConfig cfg = default_config();
    cfg.seed = 42;
    cfg.model.inner.lr = inner::LearningRate::dynamic(0.5);
    cfg.model.inner.loss = inner::Loss::smooth_l1;
    cfg.ablate.epochs = {1, 4};
    cfg.bench.tokens = {64, 128};
    const auto j = to_json(cfg);
    const RunConfig back = parse_config(j);
    CHECK(to_json(back) == j);
    CHECK(back.seed == 42);
    CHECK(back.model.inner.loss == inner::Loss::smooth_l1);
    CHECK(lr_label(back.model.inner.lr) == "dynamic:0.5");
    CHECK_THROWS_AS(parse_config(nlohmann::json{{"inner", {{"loss", "hinge"}}}}), ConfigError);
  }

  TEST_CASE("train is deterministic and epochs=0 writes the initial weights") {
    RunConfig cfg = small_config();
    std::ostringstream log;
    cfg.out = temp_dir("train_a");
    REQUIRE(cmd_train(cfg, log) == 0);
    const auto a = read_lines(cfg.out + "/train.csv");
    cfg.out = temp_dir("train_b");
    REQUIRE(cmd_train(cfg, log) == 0);
    const auto b = read_lines(cfg.out + "/train.csv");
    REQUIRE(a.size() == 3);
    CHECK(a[0] == "epoch,train_loss,val_acc,wall_s");
    // the wall-time column differs; loss and accuracy must not
    for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i].substr(0, a[i].rfind(',')) == b[i].substr(0, b[i].rfind(',')));
    CHECK(fs::exists(cfg.out + "/manifest.json"));

    cfg.trainer.epochs = 0;
    cfg.out = temp_dir("train_zero");
    REQUIRE(cmd_train(cfg, log) == 0);
    CHECK(read_lines(cfg.out + "/train.csv").size() == 1);
    ModelConfig m = cfg.model;
    (void)load_task(cfg.task, cfg.seed, m);
    const NamedTensors init = init_model(m, cfg.seed), saved = load_checkpoint(cfg.out + "/checkpoint");
    REQUIRE(saved.size() == init.size());
    for (const auto& [name, t] : init) CHECK(max_abs_diff(saved.at(name), t) == 0.0);
  }

  TEST_CASE("ablation grid rows and divergence marking") {
    RunConfig cfg = small_config();
    cfg.trainer.epochs = 1;
    cfg.ablate.losses = {inner::Loss::mse, inner::Loss::mae};
    cfg.ablate.lrs = {inner::LearningRate::fixed(0.1), inner::LearningRate::fixed(1.0)};
    cfg.ablate.seeds = {0};
    CHECK(expand_grid(cfg.ablate).size() == 4);
    cfg.out = temp_dir("ablate");
    std::ostringstream log;
    REQUIRE(cmd_ablate(cfg, log) == 0);
    const auto lines = read_lines(cfg.out + "/ablate.csv");
    CHECK(lines.size() == 5);

    cfg.ablate.losses = {inner::Loss::mse};
    cfg.ablate.lrs = {inner::LearningRate::fixed(10.0)};
    cfg.ablate.epochs = {8};
    cfg.trainer.epochs = 2;
    cfg.out = temp_dir("ablate_div");
    REQUIRE(cmd_ablate(cfg, log) == 0);
    const auto div = read_lines(cfg.out + "/ablate.csv");
    REQUIRE(div.size() == 2);
    CHECK(div[1].find('*') != std::string::npos);
    std::ifstream mf(cfg.out + "/manifest.json");
    const auto manifest = nlohmann::json::parse(mf);
    CHECK(manifest.at("diverged_cells") == 1);
  }

  TEST_CASE("bench rows carry the analytic and counted FLOPs") {
    BenchConfig b;
    b.tokens = {64, 256};
    b.channels = 8;
    b.warmup = 0;
    b.reps = 1;
    const auto rows = run_bench(b, 0);
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) {
      CHECK(r.flops == r.counted_macs);
      CHECK(r.mean_ms > 0.0);
    }
    CHECK(bench_grid(256).tokens() == 256);
    CHECK(bench_grid(24).height == 4);
  }

  TEST_CASE("log-log slope of an exact power law") {
    std::vector<std::size_t> n{100, 200, 400, 800};
    std::vector<double> lin, quad;
    for (auto x : n) {
      lin.push_back(3e-4 * double(x));
      quad.push_back(1e-7 * double(x) * double(x));
    }
    CHECK(loglog_slope(n, lin) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(loglog_slope(n, quad) == doctest::Approx(2.0).epsilon(1e-12));
  }

  TEST_CASE("gradcheck catches an injected backward fault") {
    GradcheckOptions opt;
    const inner::Spec fc{inner::Kind::fc};
    CHECK(gradcheck_cell(fc, inner::Loss::mse, inner::LearningRate::Mode::fixed, 1, opt).pass);
    opt.fault = inner::Loss::mse;
    CHECK_FALSE(gradcheck_cell(fc, inner::Loss::mse, inner::LearningRate::Mode::fixed, 1, opt).pass);
    CHECK(gradcheck_cell(fc, inner::Loss::dot_product, inner::LearningRate::Mode::fixed, 1, opt).pass);
    opt.fault.reset();
    const GradcheckCell mae = gradcheck_cell(fc, inner::Loss::mae, inner::LearningRate::Mode::fixed, 1, opt);
    CHECK(mae.pass);
    CHECK(mae.wv_grad == 0.0);
  }

  TEST_CASE("loss report conforms to the closed forms") {
    for (const auto& r : loss_report(3)) {
      INFO(inner::to_string(r.loss));
      CHECK(r.pass);
    }
  }
}
