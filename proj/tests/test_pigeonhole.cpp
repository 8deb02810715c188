#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"
#include "vitmix/pigeonhole.hpp"

using namespace vitmix;
using vitmix::testing::random_tensor;

namespace {

// Independent count: every quantized mean goes into a std::set.
std::uint64_t brute_distinct(const Tensor& a, const Tensor& b, std::size_t q) {
  std::set<std::size_t> levels;
  for (double x : a.values())
    for (double y : b.values()) {
      const double m = std::sqrt(x * y);
      levels.insert(std::min(static_cast<std::size_t>(m * static_cast<double>(q)), q - 1));
    }
  return levels.size();
}

}  // namespace

TEST(Quantize, EndpointsAndClamping) {
  EXPECT_EQ(quantize_unit(0.0, 8), 0u);
  EXPECT_EQ(quantize_unit(1.0, 8), 7u);
  EXPECT_EQ(quantize_unit(0.5, 8), 4u);
  EXPECT_EQ(quantize_unit(-2.0, 8), 0u);
  EXPECT_EQ(quantize_unit(3.0, 8), 7u);
}

TEST(CollisionGain, ConstantMaps) {
  const Tensor ones({2, 2}, 1.0);
  const GainReport r = collision_gain(ones, ones);
  EXPECT_EQ(r.pairs, 16u);
  EXPECT_EQ(r.distinct, 1u);
  EXPECT_EQ(r.collision_ratio, 15.0 / 16.0);
  EXPECT_FALSE(r.sampled);
}

TEST(CollisionGain, TwoValuedMaps) {
  const GainReport r = collision_gain(Tensor::matrix({{0, 1}, {0, 1}}), Tensor({2, 2}, 1.0), 1 << 20);
  EXPECT_EQ(r.pairs, 16u);
  EXPECT_EQ(r.distinct, 2u);
  EXPECT_EQ(r.collision_ratio, 14.0 / 16.0);
}

TEST(CollisionGain, MatchesBruteForceAndBounds) {
  SeededRng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(16);
    const std::size_t q = 1 + rng.below(2000);
    const Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
    const GainReport r = collision_gain(a, b, q);
    EXPECT_EQ(r.distinct, brute_distinct(a, b, q));
    EXPECT_LE(r.distinct, q);
    EXPECT_LE(r.distinct, r.pairs);
    if (r.pairs > q) EXPECT_GT(r.collision_ratio, 0.0);
  }
}

TEST(CollisionGain, SymmetricInArguments) {
  SeededRng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = random_tensor({5, 5}, rng), b = random_tensor({5, 5}, rng);
    const GainReport x = collision_gain(a, b, 300), y = collision_gain(b, a, 300);
    EXPECT_EQ(x.pairs, y.pairs);
    EXPECT_EQ(x.distinct, y.distinct);
    EXPECT_EQ(x.collision_ratio, y.collision_ratio);
  }
}

TEST(CollisionGain, RefiningQuantizationNeverLosesLevels) {
  SeededRng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = random_tensor({6, 6}, rng), b = random_tensor({6, 6}, rng);
    std::uint64_t prev = 0;
    for (std::size_t q = 3; q <= 3 * 1024; q *= 2) {
      const std::uint64_t d = collision_gain(a, b, q).distinct;
      EXPECT_GE(d, prev) << "q " << q;
      prev = d;
    }
  }
}

TEST(CollisionGain, NonMultipleRefinementCanMergeLevels) {
  // sqrt(0.09) = 0.3 and sqrt(0.16) = 0.4: q = 3 separates them, q = 4 does not.
  const Tensor a = Tensor::matrix({{0.09, 0.16}});
  const Tensor b = Tensor::matrix({{1.0, 1.0}});
  EXPECT_EQ(collision_gain(a, b, 3).distinct, 2u);
  EXPECT_EQ(collision_gain(a, b, 4).distinct, 1u);
}

TEST(CollisionGain, FourteenGridForcesCollisions) {
  SeededRng rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    const GainReport r = collision_gain(random_tensor({14, 14}, rng), random_tensor({14, 14}, rng), 256);
    EXPECT_EQ(r.pairs, 38416u);
    EXPECT_FALSE(r.sampled);
    EXPECT_LE(r.distinct, 256u);
    EXPECT_GT(r.collision_ratio, 0.0);
  }
}

TEST(CollisionGain, LargeGridsAreSampledDeterministically) {
  SeededRng rng(16);
  const Tensor a = random_tensor({20, 20}, rng), b = random_tensor({20, 20}, rng);
  const GainReport x = collision_gain(a, b, 4096, 7), y = collision_gain(a, b, 4096, 7);
  EXPECT_TRUE(x.sampled);
  EXPECT_EQ(x.pairs, kSampledPairs);
  EXPECT_EQ(x.distinct, y.distinct);
  EXPECT_LE(x.distinct, brute_distinct(a, b, 4096));
}

TEST(CollisionGain, BadArguments) {
  EXPECT_THROW(collision_gain(Tensor({2, 2}), Tensor({3, 3})), DimensionError);
  EXPECT_THROW(collision_gain(Tensor({2, 2}), Tensor({2, 2}), 0), ArgumentError);
  EXPECT_THROW(collision_gain(Tensor({4}), Tensor({4})), DimensionError);
}
