#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>

#include "sevdet/nn/tensor.hpp"
#include "sevdet/random.hpp"

namespace sevdet::test {

inline nn::Tensor random_tensor(nn::Shape shape, std::uint64_t seed, double lo = -1.0,
                                double hi = 1.0) {
  Rng rng(seed);
  nn::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

inline void fill_random(nn::Tensor& t, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  for (auto& v : t.values()) v = uniform(rng, lo, hi);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    const auto base = std::filesystem::temp_directory_path();
    Rng rng(std::random_device{}());
    do {
      path_ = base / ("sevdet_" + tag + "_" + std::to_string(rng() % 1000000000ULL) + "_" +
                      std::to_string(counter++));
    } while (std::filesystem::exists(path_));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

}  // namespace sevdet::test
