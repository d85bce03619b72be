#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ttt/model.hpp"

namespace ttt {

struct LabeledSet {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

struct TrainerConfig {
  std::size_t epochs = 20;
  std::size_t batch = 64;
  std::size_t warmup_epochs = 2;
  AdamWConfig opt{};
  std::size_t threads = 1;
  std::uint64_t seed = 0;
  // Gradients are summed over fixed groups of this many samples, then the
  // groups in order, so results do not depend on the thread count.
  std::size_t chunk = 4;
  // Applied to each training input with a per-sample seed (augmentation).
  std::function<Tensor(const Tensor&, std::uint64_t)> transform;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double wall_s = 0.0;
};

// Mean cross-entropy and its parameter gradients over `indices` of `set`.
struct BatchResult {
  double loss = 0.0;
  NamedTensors grads;
};
BatchResult batch_gradients(const NamedTensors& params, const ModelConfig& cfg, const LabeledSet& set,
                            std::span<const std::size_t> indices, std::size_t threads, std::size_t chunk,
                            const std::function<Tensor(const Tensor&, std::size_t)>& input = {});

double accuracy(const NamedTensors& params, const ModelConfig& cfg, const LabeledSet& set, std::size_t threads);

class Trainer {
 public:
  Trainer(ModelConfig model, TrainerConfig cfg, NamedTensors params);

  // One pass over `train` in a seed-determined order, then validation.
  // Throws DivergenceError on a non-finite loss, gradient or weight.
  EpochStats run_epoch(const LabeledSet& train, const LabeledSet& val);

  const NamedTensors& params() const { return params_; }
  const ModelConfig& model() const { return model_; }
  std::size_t epoch() const { return epoch_; }

 private:
  ModelConfig model_;
  TrainerConfig cfg_;
  NamedTensors params_;
  OptState opt_;
  std::size_t epoch_ = 0;
};

// Runs `fn(i)` for i in [0, n) on up to `threads` workers; rethrows the first
// exception after all workers stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace ttt
