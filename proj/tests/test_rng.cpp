#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "moeclip/rng.hpp"

using namespace moeclip;

TEST(Rng, SameSeedSameStream) {
  SeededRng a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DifferentSeedsDiffer) {
  SeededRng a(1), b(2);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += a.next_u64() == b.next_u64();
  EXPECT_EQ(same, 0);
}

TEST(Rng, StateRoundTrip) {
  SeededRng a(5);
  for (int i = 0; i < 17; ++i) a.normal();
  SeededRng b;
  b.set_state(a.state());
  EXPECT_EQ(a, b);
  for (int i = 0; i < 50; ++i) ASSERT_EQ(a.uniform(), b.uniform());
}

TEST(Rng, UniformRangeAndMoments) {
  SeededRng rng(3);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
    s2 += u * u;
  }
  EXPECT_NEAR(s / n, 0.5, 5e-3);
  EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0 / 12.0, 2e-3);
}

TEST(Rng, NormalMoments) {
  SeededRng rng(4);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 1e-2);
  EXPECT_NEAR(s2 / n, 1.0, 1e-2);
}

TEST(Rng, BelowCoversRange) {
  SeededRng rng(6);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, DerivedStreamsAreDistinct) {
  std::set<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (std::uint64_t k = 0; k < 256; ++k) seeds.insert(derive_seed(s, k));
  EXPECT_EQ(seeds.size(), 4u * 256u);
}
