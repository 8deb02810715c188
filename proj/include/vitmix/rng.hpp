#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>

#include "vitmix/tensor.hpp"

namespace vitmix {

// splitmix64 stream. Normals come from Box-Muller over two consecutive
// uniforms; the second variate of each pair is cached. The integer stream is
// bit-identical on every platform.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Multiply-shift reduction, n > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double normal() noexcept {
    if (spare_) {
      const double v = *spare_;
      spare_.reset();
      return v;
    }
    // (0, 1] so the log is finite.
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    return radius * std::cos(angle);
  }

  // Normal(0, stddev) resampled until it lands within +-2 stddev.
  double truncated_normal(double stddev) noexcept {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return z * stddev;
    }
  }

  Tensor truncated_normal_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = truncated_normal(stddev);
    return t;
  }

 private:
  std::uint64_t state_;
  std::optional<double> spare_;
};

}  // namespace vitmix
