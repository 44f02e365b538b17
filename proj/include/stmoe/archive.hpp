#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stmoe/tensor.hpp"

namespace stmoe::io {

/// Versioned binary container of named f32le tensors plus a JSON header.
struct TensorArchive {
  std::string header_json;
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor* find(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

}  // namespace stmoe::io
