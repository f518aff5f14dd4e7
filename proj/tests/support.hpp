#pragma once

#include <doctest.h>

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "dinomx/rng.hpp"
#include "dinomx/tensor.hpp"

namespace testutil {

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("dinomx_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

inline dinomx::Tensor random_tensor(dinomx::Shape shape, dinomx::Rng& rng, double lo = -1.0, double hi = 1.0) {
  dinomx::Tensor t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace testutil
