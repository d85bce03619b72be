#include "ttt/data.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "ttt/errors.hpp"

namespace ttt::data {

Tensor Dataset::image(std::size_t i) const {
  if (i >= size()) throw ContractError("dataset index " + std::to_string(i) + " out of range");
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  const std::uint8_t* src = pixels.data() + i * kCifarPixels;
  Tensor img({kCifarSide, kCifarSide, kCifarChannels});
  for (std::size_t c = 0; c < kCifarChannels; ++c)
    for (std::size_t p = 0; p < plane; ++p) img.raw()[p * kCifarChannels + c] = src[c * plane + p] / 255.0;
  return img;
}

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
  begin = std::min(begin, size());
  count = std::min(count, size() - begin);
  Dataset out;
  out.split = split;
  out.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
  out.pixels.assign(pixels.begin() + begin * kCifarPixels, pixels.begin() + (begin + count) * kCifarPixels);
  return out;
}

Dataset parse_cifar10(const std::vector<std::uint8_t>& bytes, std::string split) {
  if (bytes.size() % kCifarRecord != 0) {
    throw FormatError("cifar10: " + std::to_string(bytes.size()) + " bytes is not a whole number of 3073-byte records");
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset ds;
  ds.split = std::move(split);
  ds.labels.reserve(n);
  ds.pixels.reserve(n * kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] >= kCifarClasses) {
      throw FormatError("cifar10: record " + std::to_string(i) + " has label " + std::to_string(rec[0]));
    }
    ds.labels.push_back(rec[0]);
    ds.pixels.insert(ds.pixels.end(), rec + 1, rec + kCifarRecord);
  }
  return ds;
}

Dataset load_cifar10(const std::string& path, std::string split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cifar10: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_cifar10(bytes, std::move(split));
}

Dataset load_cifar10(const std::vector<std::string>& paths, std::string split) {
  Dataset all;
  all.split = split;
  for (const auto& p : paths) {
    Dataset part = load_cifar10(p, split);
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
    all.pixels.insert(all.pixels.end(), part.pixels.begin(), part.pixels.end());
  }
  return all;
}

std::vector<std::uint8_t> serialize_cifar10(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * kCifarRecord);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
    out.insert(out.end(), ds.pixels.begin() + i * kCifarPixels, ds.pixels.begin() + (i + 1) * kCifarPixels);
  }
  return out;
}

void write_cifar10(const Dataset& ds, const std::string& path) {
  const auto bytes = serialize_cifar10(ds);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cifar10: cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor normalize_cifar(const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("normalize_cifar: expected [H x W x 3]");
  Tensor out = image;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - kCifarMean[i % 3]) / kCifarStd[i % 3];
  return out;
}

// ---------------------------------------------------------------------------

RecallTask synth_recall_task(std::uint64_t seed, std::size_t n, std::size_t N, std::size_t d) {
  if (N < 2 || d < 5) throw ConfigError("recall task needs N >= 2 and d >= 5");
  const std::size_t vocab = (d - 1) / 2;
  if (N - 1 > vocab) {
    throw ConfigError("recall task: " + std::to_string(N - 1) + " pairs need at least as many distinct keys, have " +
                      std::to_string(vocab));
  }
  RecallTask task;
  task.tokens = N;
  task.dim = d;
  task.vocab = vocab;
  std::mt19937_64 rng(seed);
  std::vector<int> keys(vocab);
  std::iota(keys.begin(), keys.end(), 0);
  for (std::size_t s = 0; s < n; ++s) {
    std::shuffle(keys.begin(), keys.end(), rng);
    Tensor x({N, d});
    std::vector<std::pair<int, int>> pairs;
    for (std::size_t t = 0; t + 1 < N; ++t) {
      const int key = keys[t];
      const int value = static_cast<int>(rng() % vocab);
      pairs.emplace_back(key, value);
      x.at(t, static_cast<std::size_t>(key)) = 1.0;
      x.at(t, vocab + static_cast<std::size_t>(value)) = 1.0;
    }
    const auto& q = pairs[rng() % pairs.size()];
    x.at(N - 1, static_cast<std::size_t>(q.first)) = 1.0;
    x.at(N - 1, 2 * vocab) = 1.0;
    task.inputs.push_back(std::move(x));
    task.labels.push_back(q.second);
    task.query_keys.push_back(q.first);
    task.pairs.push_back(std::move(pairs));
  }
  return task;
}

// ---------------------------------------------------------------------------

Tensor hflip(const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("hflip: expected [H x W x C]");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      std::copy_n(image.raw() + (y * w + x) * c, c, out.raw() + (y * w + (w - 1 - x)) * c);
  return out;
}

Tensor shift_crop(const Tensor& image, long dy, long dx) {
  if (image.rank() != 3) throw DimensionError("shift_crop: expected [H x W x C]");
  const long h = static_cast<long>(image.dim(0)), w = static_cast<long>(image.dim(1));
  const std::size_t c = image.dim(2);
  Tensor out = Tensor::zeros(image.shape());
  for (long y = 0; y < h; ++y) {
    const long sy = y + dy;
    if (sy < 0 || sy >= h) continue;
    for (long x = 0; x < w; ++x) {
      const long sx = x + dx;
      if (sx < 0 || sx >= w) continue;
      std::copy_n(image.raw() + (sy * w + sx) * c, c, out.raw() + (y * w + x) * c);
    }
  }
  return out;
}

Tensor augment(const Tensor& image, const AugmentConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const bool flip = (rng() & 1U) != 0;
  const long pad = static_cast<long>(cfg.pad);
  const long dy = static_cast<long>(rng() % (2 * cfg.pad + 1)) - pad;
  const long dx = static_cast<long>(rng() % (2 * cfg.pad + 1)) - pad;
  Tensor out = cfg.flip && flip ? hflip(image) : image;
  if (pad > 0) out = shift_crop(out, dy, dx);
  return out;
}

}  // namespace ttt::data
