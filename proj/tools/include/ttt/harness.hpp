#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttt/data.hpp"
#include "ttt/train.hpp"

namespace ttt::harness {

// ---------------------------------------------------------------------------
// Run configuration

struct TaskConfig {
  std::string kind = "recall";  // recall | cifar10
  std::size_t train = 2000;
  std::size_t val = 500;
  // recall
  std::size_t tokens = 8;
  std::size_t dim = 17;
  // cifar10
  std::string data_dir;
  bool augment = true;
};

struct AblateGrid {
  std::vector<inner::Loss> losses{inner::Loss::dot_product, inner::Loss::mse, inner::Loss::mae};
  std::vector<inner::LearningRate> lrs{inner::LearningRate::fixed(0.1), inner::LearningRate::fixed(1.0)};
  std::vector<std::size_t> epochs{1};
  std::vector<std::size_t> parts{1};
  // Each entry is a full head assignment; empty selects the ViT^3 default.
  std::vector<std::vector<inner::Spec>> models{{}};
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct BenchConfig {
  std::vector<std::size_t> tokens{256, 512, 1024, 2048, 4096, 8192};
  std::size_t channels = 32;
  std::size_t heads = 2;
  inner::Spec model{inner::Kind::fc};
  std::size_t warmup = 3;
  std::size_t reps = 9;
};

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string out = "runs";
  TaskConfig task;
  ModelConfig model;
  TrainerConfig trainer;
  AblateGrid ablate;
  BenchConfig bench;
};

// Defaults sized for the synthetic recall task.
RunConfig default_config();
// Fields present in `j` override `base`.
RunConfig parse_config(const nlohmann::json& j, RunConfig base = default_config());
nlohmann::json to_json(const RunConfig& cfg);

std::string lr_label(const inner::LearningRate& lr);
std::string heads_label(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Output

class CsvWriter {
 public:
  CsvWriter(const std::string& path, std::vector<std::string> header);
  void row(const std::vector<std::string>& cells);

 private:
  std::string path_;
  std::size_t columns_;
};

std::string fmt(double v, int digits = 6);
nlohmann::json machine_fingerprint();
void write_manifest(const std::string& dir, const RunConfig& cfg, const nlohmann::json& extra);

// ---------------------------------------------------------------------------
// Data

struct TaskData {
  LabeledSet train;
  LabeledSet val;
  std::size_t classes = 0;
  // Per-sample training transform (augmentation, normalization); may be empty.
  std::function<Tensor(const Tensor&, std::uint64_t)> transform;
};

// Adjusts `model` (input kind, grid, classes) to the task and builds the sets.
TaskData load_task(const TaskConfig& task, std::uint64_t seed, ModelConfig& model);

// ---------------------------------------------------------------------------
// train

struct TrainReport {
  std::vector<EpochStats> epochs;
  bool diverged = false;
  std::string divergence;
  double best_val_acc = 0.0;
  NamedTensors params;
};

// Trains from a fresh init. `on_epoch` sees every completed epoch.
TrainReport train_run(const ModelConfig& model, const TrainerConfig& trainer, const TaskData& data,
                      std::uint64_t seed, const std::function<void(const EpochStats&)>& on_epoch = {});

int cmd_train(const RunConfig& cfg, std::ostream& log);

// ---------------------------------------------------------------------------
// ablate

struct AblateCell {
  std::vector<inner::Spec> heads;
  inner::TrainConfig inner;
  std::uint64_t seed = 0;
  std::string label() const;
};

struct AblateRow {
  AblateCell cell;
  std::size_t params = 0;
  std::uint64_t flops = 0;
  double throughput = 0.0;  // training tokens per second
  double metric = 0.0;      // final (or best before divergence) validation accuracy
  double final_loss = 0.0;
  bool diverged = false;
  std::string error;
};

// Per-seed agreement with a directional claim, e.g. "mse > mae".
struct Ordering {
  std::string claim;
  std::size_t agree = 0;
  std::size_t seeds = 0;
  bool holds() const { return seeds > 0 && 2 * agree > seeds; }
};
// MSE and dot-product each above MAE, and lr 1.0 at least lr 0.1, compared
// at lr 1.0 and per loss respectively. Claims whose cells are absent are omitted.
std::vector<Ordering> directional_checks(const std::vector<AblateRow>& rows);

std::vector<AblateCell> expand_grid(const AblateGrid& grid);
AblateRow run_cell(const RunConfig& cfg, const AblateCell& cell);
std::vector<AblateRow> run_ablation(const RunConfig& cfg, const std::function<void(const AblateRow&)>& on_row = {});
int cmd_ablate(const RunConfig& cfg, std::ostream& log);

// ---------------------------------------------------------------------------
// bench

struct BenchRow {
  std::string layer;  // ttt | softmax
  std::size_t tokens = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  std::size_t peak_bytes = 0;
  std::size_t largest_allocation = 0;
  std::uint64_t flops = 0;
  std::uint64_t counted_macs = 0;  // instrumented count of one run
};

Grid bench_grid(std::size_t tokens);
std::vector<BenchRow> run_bench(const BenchConfig& cfg, std::uint64_t seed,
                                const std::function<void(const BenchRow&)>& on_row = {});
// Least-squares slope of log(time) against log(N).
double loglog_slope(const std::vector<std::size_t>& n, const std::vector<double>& t);
int cmd_bench(const RunConfig& cfg, std::ostream& log);

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckCell {
  inner::Spec model;
  inner::Loss loss = inner::Loss::mse;
  inner::LearningRate::Mode lr_mode = inner::LearningRate::Mode::fixed;
  std::size_t parts = 1;
  double max_rel_error = 0.0;
  std::string worst_param;
  double wv_grad = 0.0;  // max |dL/dW_V|
  bool pass = false;
  std::string name() const;
};

struct GradcheckOptions {
  std::size_t channels = 4;
  std::size_t heads = 1;
  Grid grid{2, 3};
  std::size_t epochs = 2;
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::optional<inner::Loss> fault;
};

GradcheckCell gradcheck_cell(const inner::Spec& model, inner::Loss loss, inner::LearningRate::Mode mode,
                             std::size_t parts, const GradcheckOptions& opt);
std::vector<GradcheckCell> gradcheck_matrix(const GradcheckOptions& opt);
int cmd_gradcheck(const RunConfig& cfg, std::ostream& log, std::optional<inner::Loss> fault = std::nullopt);

// ---------------------------------------------------------------------------
// lossreport

struct LossReportRow {
  inner::Loss loss = inner::Loss::mse;
  double closed_form = 0.0;  // at entry (0, 0)
  double numeric = 0.0;
  double max_abs_error = 0.0;
  std::string law;
  bool pass = false;
};

std::vector<LossReportRow> loss_report(std::uint64_t seed, std::size_t rows = 8, std::size_t dim = 4,
                                       double eps = 1e-5, double tolerance = 1e-6);
int cmd_lossreport(const RunConfig& cfg, std::ostream& log);

}  // namespace ttt::harness
