#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cllm {

// Stream seeds are derived from a root seed and a stage name (plus an optional
// index) via FNV-1a and a splitmix64 finaliser, so every stage of a run draws
// from its own reproducible stream:
//   seed(root, stage, index) = splitmix64(root ^ fnv1a(stage) ^ splitmix64(index + 1))
std::uint64_t derive_seed(std::uint64_t root, std::string_view stage, std::uint64_t index = 0);

std::uint64_t fnv1a64(std::string_view bytes);

// mt19937_64 with distribution code written out here so that draws do not
// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, n), unbiased.
  std::size_t uniform_index(std::size_t n);
  // Uniform in [0, 1) with 53 random bits.
  double uniform01();
  double normal();
  bool bernoulli(double p) { return uniform01() < p; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cllm
