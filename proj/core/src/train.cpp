#include "ttt/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

namespace ttt {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E5ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void accumulate(NamedTensors& into, const NamedTensors& g) {
  for (const auto& [name, t] : g) {
    auto [it, fresh] = into.try_emplace(name, t);
    if (!fresh) {
      double* dst = it->second.raw();
      for (std::size_t i = 0; i < t.size(); ++i) dst[i] += t[i];
    }
  }
}

}  // namespace

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

BatchResult batch_gradients(const NamedTensors& params, const ModelConfig& cfg, const LabeledSet& set,
                            std::span<const std::size_t> indices, std::size_t threads, std::size_t chunk,
                            const std::function<Tensor(const Tensor&, std::size_t)>& input) {
  if (indices.empty()) throw ContractError("batch_gradients: empty batch");
  chunk = std::max<std::size_t>(1, chunk);
  const std::size_t chunks = (indices.size() + chunk - 1) / chunk;
  std::vector<NamedTensors> partial(chunks);
  std::vector<double> losses(chunks, 0.0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t end = std::min(indices.size(), (c + 1) * chunk);
    for (std::size_t s = c * chunk; s < end; ++s) {
      const std::size_t idx = indices[s];
      ad::Tape tape;
      Binder bind(tape, params);
      const Tensor x = input ? input(set.inputs[idx], idx) : set.inputs[idx];
      const int label = set.labels[idx];
      ad::Var loss = ad::cross_entropy(forward_sample(bind, x, cfg), std::span<const int>(&label, 1));
      losses[c] += loss.value().item();
      accumulate(partial[c], bind.gradients(tape.backward(loss)));
    }
  });
  BatchResult r;
  for (std::size_t c = 0; c < chunks; ++c) {
    r.loss += losses[c];
    accumulate(r.grads, partial[c]);
  }
  const double inv = 1.0 / static_cast<double>(indices.size());
  r.loss *= inv;
  for (auto& [name, g] : r.grads)
    for (auto& v : g.data()) v *= inv;
  return r;
}

double accuracy(const NamedTensors& params, const ModelConfig& cfg, const LabeledSet& set, std::size_t threads) {
  if (set.size() == 0) return 0.0;
  std::vector<char> hit(set.size(), 0);
  parallel_for(set.size(), threads, [&](std::size_t i) {
    ad::Tape tape(false);
    Binder bind(tape, params);
    const Tensor& logits = forward_sample(bind, set.inputs[i], cfg).value();
    const auto best = std::max_element(logits.data().begin(), logits.data().end()) - logits.data().begin();
    hit[i] = best == set.labels[i];
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(set.size());
}

Trainer::Trainer(ModelConfig model, TrainerConfig cfg, NamedTensors params)
    : model_(std::move(model)), cfg_(std::move(cfg)), params_(std::move(params)) {
  model_.validate();
  if (cfg_.batch == 0) throw ConfigError("batch size must be positive");
}

EpochStats Trainer::run_epoch(const LabeledSet& train, const LabeledSet& val) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = train.size();
  if (n == 0) throw ConfigError("empty training set");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix(cfg_.seed, epoch_));
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t steps = (n + cfg_.batch - 1) / cfg_.batch;
  const std::size_t total = steps * cfg_.epochs;
  const std::size_t warmup = steps * cfg_.warmup_epochs;
  std::function<Tensor(const Tensor&, std::size_t)> input;
  if (cfg_.transform) {
    const std::uint64_t epoch_seed = mix(cfg_.seed ^ 0xA5A5A5A5ULL, epoch_);
    input = [&, epoch_seed](const Tensor& x, std::size_t idx) { return cfg_.transform(x, mix(epoch_seed, idx)); };
  }

  double loss_sum = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t begin = s * cfg_.batch, end = std::min(n, begin + cfg_.batch);
    std::span<const std::size_t> idx(order.data() + begin, end - begin);
    BatchResult r = batch_gradients(params_, model_, train, idx, cfg_.threads, cfg_.chunk, input);
    if (!std::isfinite(r.loss)) {
      throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch_) + ", step " +
                            std::to_string(s));
    }
    for (const auto& [name, g] : r.grads) {
      if (!g.all_finite()) throw DivergenceError("non-finite gradient for " + name + " at epoch " + std::to_string(epoch_));
    }
    loss_sum += r.loss * static_cast<double>(idx.size());
    adamw_step(params_, r.grads, opt_, cfg_.opt, cosine_lr(opt_.step, total, warmup, cfg_.opt.lr));
  }
  EpochStats st;
  st.epoch = epoch_;
  st.train_loss = loss_sum / static_cast<double>(n);
  st.val_acc = accuracy(params_, model_, val, cfg_.threads);
  st.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ++epoch_;
  return st;
}

}  // namespace ttt
