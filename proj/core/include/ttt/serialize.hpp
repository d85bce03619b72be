#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "ttt/tensor.hpp"

namespace ttt {

// Tensor container record:
//   "TTT1" | u8 dtype (1 = f32, 2 = f64) | u8 rank | u32 extents[rank] | raw LE values
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

using NamedTensors = std::map<std::string, Tensor>;

// Checkpoint = <stem>.bin (concatenated tensor records) plus <stem>.json, a
// manifest mapping each name to its byte offset and shape.
void save_checkpoint(const std::filesystem::path& stem, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& stem);

}  // namespace ttt
