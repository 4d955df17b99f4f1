#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace pfnl {

// Seeded generator with distribution helpers whose output depends only on the
// engine bits, so sequences are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1).
  double uniform();
  // Uniform integer on [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Normal truncated to [-2 stddev, 2 stddev] by resampling.
  double truncated_normal(double stddev);

  std::string serialize() const;
  static Rng deserialize(const std::string& state);

 private:
  Rng() = default;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer; derives independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace pfnl
