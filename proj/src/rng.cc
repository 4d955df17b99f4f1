#include "pfnl/rng.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "pfnl/error.h"

namespace pfnl {

double Rng::uniform() {
  // 53 random mantissa bits.
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error("Rng::below(0)");
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

double Rng::truncated_normal(double stddev) {
  double z;
  do {
    z = normal();
  } while (std::abs(z) > 2.0);
  return stddev * z;
}

std::string Rng::serialize() const {
  std::ostringstream out;
  out << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' '
      << std::bit_cast<std::uint64_t>(spare_);
  return out.str();
}

Rng Rng::deserialize(const std::string& state) {
  Rng rng;
  std::istringstream in(state);
  int spare_flag = 0;
  std::uint64_t spare_bits = 0;
  in >> rng.engine_ >> spare_flag >> spare_bits;
  if (!in) throw FormatError("malformed RNG state", 0);
  rng.has_spare_ = spare_flag != 0;
  rng.spare_ = std::bit_cast<double>(spare_bits);
  return rng;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace pfnl
