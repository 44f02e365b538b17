#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "stmoe/random.hpp"
#include "stmoe/tensor.hpp"

namespace testutil {

inline stmoe::Tensor random_tensor(stmoe::Shape shape, stmoe::Rng& rng, double lo = -1.0, double hi = 1.0) {
  stmoe::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = stmoe::uniform(rng, lo, hi);
  return t;
}

inline double max_rel_diff(const stmoe::Tensor& a, const stmoe::Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return den > 0.0 ? num / den : num;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("stmoe_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
