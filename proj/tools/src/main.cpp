#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ttt/harness.hpp"

using namespace ttt;

int main(int argc, char** argv) {
  CLI::App app{"Test-time training attention: training, ablations, benchmarks and checks"};
  app.fallthrough();
  app.require_subcommand(1);
  std::string config_path, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed for every random stream");
  app.add_option("--out", out, "Output directory (default runs/<command>)");
  app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "Train a model; writes train.csv and a checkpoint");
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid; writes ablate.csv");
  auto* bench = app.add_subcommand("bench", "Time TTT against softmax attention over N; writes bench.csv");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every inner configuration");
  auto* lossreport = app.add_subcommand("lossreport", "Mixed second derivatives of the inner losses");
  std::string fault;
  gradcheck->add_option("--inject-fault", fault, "Negate the backward of one loss (self-test)");

  CLI11_PARSE(app, argc, argv);

  try {
    harness::RunConfig cfg = harness::default_config();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      cfg = harness::parse_config(nlohmann::json::parse(in, nullptr, true, true));
    }
    cfg.command = app.get_subcommands().front()->get_name();
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (!out.empty()) cfg.out = out;
    else if (config_path.empty() || cfg.out == "runs") cfg.out = "runs/" + cfg.command;

    if (*train) return harness::cmd_train(cfg, std::cout);
    if (*ablate) return harness::cmd_ablate(cfg, std::cout);
    if (*bench) return harness::cmd_bench(cfg, std::cout);
    if (*gradcheck) {
      std::optional<inner::Loss> f;
      if (!fault.empty()) f = inner::parse_loss(fault);
      return harness::cmd_gradcheck(cfg, std::cout, f);
    }
    if (*lossreport) return harness::cmd_lossreport(cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
