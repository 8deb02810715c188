#pragma once

// Collision count among pairwise geometric means of two attribution maps.
// With n x n maps there are n^4 pairs (a_ij, b_kl); their means are quantized
// to q levels, so whenever n^4 > q at least two pairs must share a level.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "vitmix/attribution_map.hpp"
#include "vitmix/errors.hpp"
#include "vitmix/rng.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

struct GainReport {
  std::uint64_t pairs = 0;     // pairs examined (n^4 when exhaustive)
  std::uint64_t distinct = 0;  // distinct quantized geometric means
  double collision_ratio = 0.0;  // 1 - distinct / pairs
  std::size_t quantization_levels = 0;
  bool sampled = false;
};

inline constexpr std::size_t kDefaultQuantization = 1024;
inline constexpr std::size_t kExhaustiveCellLimit = 256;
inline constexpr std::uint64_t kSampledPairs = 1'000'000;

// Level index in [0, q) of a value in [0, 1].
inline std::size_t quantize_unit(double v, std::size_t q) {
  const double c = std::clamp(v, 0.0, 1.0);
  return std::min(static_cast<std::size_t>(c * static_cast<double>(q)), q - 1);
}

inline GainReport collision_gain(const Tensor& a, const Tensor& b, std::size_t q = kDefaultQuantization,
                                 std::uint64_t sample_seed = 0) {
  require_rank(a, 2, "collision_gain");
  if (a.shape() != b.shape())
    throw DimensionError("collision_gain shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  if (q == 0) throw ArgumentError("collision_gain: quantization levels must be positive");
  const std::size_t cells = a.size();
  std::vector<bool> seen(q, false);
  std::uint64_t distinct = 0;
  auto visit = [&](double x, double y) {
    const std::size_t level = quantize_unit(std::sqrt(std::clamp(x, 0.0, 1.0) * std::clamp(y, 0.0, 1.0)), q);
    if (!seen[level]) {
      seen[level] = true;
      ++distinct;
    }
  };

  GainReport r;
  r.quantization_levels = q;
  if (cells <= kExhaustiveCellLimit) {
    for (std::size_t i = 0; i < cells; ++i)
      for (std::size_t j = 0; j < cells; ++j) visit(a[i], b[j]);
    r.pairs = static_cast<std::uint64_t>(cells) * cells;
  } else {
    SeededRng rng(sample_seed);
    for (std::uint64_t s = 0; s < kSampledPairs; ++s) {
      const std::size_t i = rng.below(cells);
      const std::size_t j = rng.below(cells);
      visit(a[i], b[j]);
    }
    r.pairs = kSampledPairs;
    r.sampled = true;
  }
  r.distinct = distinct;
  r.collision_ratio = 1.0 - static_cast<double>(distinct) / static_cast<double>(r.pairs);
  return r;
}

inline GainReport collision_gain(const AttributionMap& a, const AttributionMap& b,
                                 std::size_t q = kDefaultQuantization, std::uint64_t sample_seed = 0) {
  return collision_gain(a.grid, b.grid, q, sample_seed);
}

}  // namespace vitmix
