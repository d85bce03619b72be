#include "ttt/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

namespace ttt {

static_assert(std::endian::native == std::endian::little, "tensor container assumes a little-endian host");

namespace {

constexpr std::array<char, 4> kMagic{'T', 'T', 'T', '1'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("tensor container truncated");
  return v;
}

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  auto p = stem;
  p += ext;
  return p;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.rank() == 0 || t.rank() > 255) throw FormatError("tensor container: rank must be in [1, 255]");
  os.write(kMagic.data(), kMagic.size());
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  if (t.dtype() == DType::f32) {
    for (double v : t.data()) put<float>(os, static_cast<float>(v));
  } else {
    os.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw FormatError("tensor container: write failed");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError("tensor container: bad magic");
  const auto code = get<std::uint8_t>(is);
  if (code != static_cast<std::uint8_t>(DType::f32) && code != static_cast<std::uint8_t>(DType::f64)) {
    throw FormatError("tensor container: unknown dtype code " + std::to_string(code));
  }
  const auto dtype = static_cast<DType>(code);
  const auto rank = get<std::uint8_t>(is);
  if (rank == 0) throw FormatError("tensor container: zero rank");
  Shape shape(rank);
  for (auto& e : shape) {
    e = get<std::uint32_t>(is);
    if (e == 0) throw FormatError("tensor container: zero extent");
  }
  Tensor t(shape, dtype);
  if (dtype == DType::f32) {
    for (auto& v : t.data()) v = get<float>(is);
  } else if (!is.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
    throw FormatError("tensor container truncated");
  }
  return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor(is);
}

void save_checkpoint(const std::filesystem::path& stem, const NamedTensors& tensors) {
  std::ofstream bin(with_ext(stem, ".bin"), std::ios::binary);
  if (!bin) throw FormatError("cannot open checkpoint " + stem.string() + ".bin");
  nlohmann::json index = nlohmann::json::object();
  for (const auto& [name, t] : tensors) {
    const auto offset = static_cast<std::uint64_t>(bin.tellp());
    write_tensor(bin, t);
    index[name] = {{"offset", offset}, {"shape", t.shape()}};
  }
  nlohmann::json manifest = {{"format", "TTT1"}, {"tensors", index}};
  std::ofstream js(with_ext(stem, ".json"));
  js << manifest.dump(2) << '\n';
  if (!js) throw FormatError("cannot write checkpoint manifest");
}

NamedTensors load_checkpoint(const std::filesystem::path& stem) {
  std::ifstream js(with_ext(stem, ".json"));
  if (!js) throw FormatError("cannot open checkpoint manifest " + stem.string() + ".json");
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "TTT1") throw FormatError("checkpoint manifest: unknown format");
  std::ifstream bin(with_ext(stem, ".bin"), std::ios::binary);
  if (!bin) throw FormatError("cannot open checkpoint " + stem.string() + ".bin");
  NamedTensors out;
  for (const auto& [name, entry] : manifest.at("tensors").items()) {
    bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    Tensor t = read_tensor(bin);
    if (t.shape() != entry.at("shape").get<Shape>()) throw FormatError("checkpoint: shape mismatch for " + name);
    out.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace ttt
