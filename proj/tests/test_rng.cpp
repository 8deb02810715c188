#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "vitmix/rng.hpp"

using namespace vitmix;

// Reference stream produced by a separate Python splitmix64.
TEST(SeededRng, MatchesGoldenSequenceForSeed42) {
  std::ifstream f(std::string(VITMIX_TEST_DATA) + "/golden/rng_seed42.txt");
  ASSERT_TRUE(f) << "golden file missing";
  std::vector<std::uint64_t> golden;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) golden.push_back(std::stoull(line));
  ASSERT_EQ(golden.size(), 100u);
  SeededRng rng(42);
  for (std::size_t i = 0; i < golden.size(); ++i) EXPECT_EQ(rng.next_u64(), golden[i]) << "draw " << i;
}

TEST(SeededRng, SameSeedSameStream) {
  SeededRng a(7), b(7), c(8);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(SeededRng, UniformAndBelowStayInRange) {
  SeededRng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(rng.below(7), 7u);
  }
}

TEST(SeededRng, NormalMoments) {
  SeededRng rng(99);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(SeededRng, TruncatedNormalBounded) {
  SeededRng rng(4);
  for (int i = 0; i < 50000; ++i) EXPECT_LE(std::abs(rng.truncated_normal(0.02)), 0.04);
  const Tensor t = rng.truncated_normal_tensor({3, 4}, 0.5);
  EXPECT_EQ(t.shape(), (Shape{3, 4}));
  for (double v : t.values()) EXPECT_LE(std::abs(v), 1.0);
}
