#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardaware/tensor.hpp"

namespace hardaware {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  /// Free-form metadata stored in the manifest (architecture spec,
  /// optimizer hyper-parameters, registry, config hash, ...).
  nlohmann::json meta = nlohmann::json::object();

  const Tensor& at(const std::string& name) const;
  const Tensor* find(const std::string& name) const;
};

/// Writes `<manifest>` (JSON: name, shape, byte offset per tensor) and a
/// companion blob `<manifest stem>.bin` of little-endian float64 values in
/// manifest order.
void save_checkpoint(const std::filesystem::path& manifest, const Checkpoint& checkpoint);

/// Inverse of save_checkpoint; bit-exact. Throws FormatError on a truncated
/// or inconsistent blob.
Checkpoint load_checkpoint(const std::filesystem::path& manifest);

}  // namespace hardaware
