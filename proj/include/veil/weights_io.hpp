#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "veil/tensor.hpp"

namespace veil {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Writes header.json ({name, shape, byte offset} per tensor) and
// weights.bin (little-endian 64-bit floats concatenated in header order).
void save_weights(const std::filesystem::path& directory, const std::vector<NamedTensor>& tensors);

std::vector<NamedTensor> load_weights(const std::filesystem::path& directory);

}  // namespace veil
