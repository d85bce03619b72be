#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ttt/tensor.hpp"

namespace ttt::data {

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarChannels = 3;
inline constexpr std::size_t kCifarPixels = kCifarSide * kCifarSide * kCifarChannels;  // 3072
inline constexpr std::size_t kCifarRecord = kCifarPixels + 1;                          // 3073
inline constexpr std::size_t kCifarClasses = 10;

// Images are kept as the raw record bytes so a loaded batch re-serializes
// bit-exactly; image(i) does the 1/255 scaling.
struct Dataset {
  std::vector<std::uint8_t> pixels;  // n * 3072, channel planes of 32x32, row-major
  std::vector<int> labels;
  std::string split;

  std::size_t size() const { return labels.size(); }
  // [32 x 32 x 3] in [0, 1]
  Tensor image(std::size_t i) const;
  Dataset slice(std::size_t begin, std::size_t count) const;
};

Dataset parse_cifar10(const std::vector<std::uint8_t>& bytes, std::string split = "train");
Dataset load_cifar10(const std::string& path, std::string split = "train");
// Concatenates several batch files (data_batch_1.bin ...).
Dataset load_cifar10(const std::vector<std::string>& paths, std::string split = "train");
std::vector<std::uint8_t> serialize_cifar10(const Dataset& ds);
void write_cifar10(const Dataset& ds, const std::string& path);

// Standard CIFAR-10 channel statistics; applied by the trainer, not the loader.
inline constexpr double kCifarMean[3] = {0.4914, 0.4822, 0.4465};
inline constexpr double kCifarStd[3] = {0.2470, 0.2435, 0.2616};
Tensor normalize_cifar(const Tensor& image);

// ---------------------------------------------------------------------------
// Associative recall. Each sequence holds N-1 (key, value) tokens followed by
// a query token repeating one of the keys; the target is that key's value.
// Token features: [key one-hot | value one-hot | query flag], so
// d = 2 * vocab + 1 with vocab = (d - 1) / 2 keys and as many value classes.

struct RecallTask {
  std::vector<Tensor> inputs;  // [N x d] each
  std::vector<int> labels;     // value class of the queried key
  std::vector<std::vector<std::pair<int, int>>> pairs;  // planted (key, value) per sample
  std::vector<int> query_keys;
  std::size_t tokens = 0;
  std::size_t dim = 0;
  std::size_t vocab = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t classes() const { return vocab; }
  Grid grid() const { return {1, tokens}; }
};

// Requires N >= 2, d >= 5 and N - 1 <= (d - 1) / 2 so keys never collide.
RecallTask synth_recall_task(std::uint64_t seed, std::size_t n, std::size_t N, std::size_t d);

// ---------------------------------------------------------------------------

struct AugmentConfig {
  bool flip = true;
  std::size_t pad = 4;
};

Tensor hflip(const Tensor& image);
// out(y, x) = in(y + dy, x + dx), zero outside the input.
Tensor shift_crop(const Tensor& image, long dy, long dx);
// Horizontal flip with p = 0.5, then a random crop of the zero-padded image,
// both drawn from `seed`.
Tensor augment(const Tensor& image, const AugmentConfig& cfg, std::uint64_t seed);

}  // namespace ttt::data
