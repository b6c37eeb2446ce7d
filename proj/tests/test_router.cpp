#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "moeclip/gradcheck.hpp"
#include "moeclip/router.hpp"

using namespace moeclip;

namespace {

Matrix one_hot_loads(const Vector& load) {
  // L = sum(load) rows, each a one-hot probability row, so column sums equal load.
  std::size_t rows = 0;
  for (double b : load) rows += static_cast<std::size_t>(b);
  Matrix p(rows, load.size());
  std::size_t r = 0;
  for (std::size_t j = 0; j < load.size(); ++j)
    for (std::size_t c = 0; c < static_cast<std::size_t>(load[j]); ++c) p(r++, j) = 1.0;
  return p;
}

Matrix random_probs(std::size_t L, std::size_t K, SeededRng& rng) {
  Matrix p(L, K);
  for (std::size_t i = 0; i < L; ++i) {
    Vector z(K);
    for (auto& v : z) v = rng.normal();
    const Vector s = softmax(z);
    std::copy(s.begin(), s.end(), p.row(i).begin());
  }
  return p;
}

}  // namespace

TEST(Route, ZeroWeightsGiveUniformRows) {
  SeededRng rng(1);
  const Matrix f = random_normal(5, 6, 1.0, rng);
  const Matrix p = route(f, {Matrix(4, 6)});
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Route, SingleExpertGetsEverything) {
  SeededRng rng(2);
  const Matrix f = random_normal(3, 4, 1.0, rng);
  const Matrix p = route(f, {random_normal(1, 4, 1.0, rng)});
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Route, ScaledFeaturesMatchDirectSoftmax) {
  SeededRng rng(3);
  const Matrix w = random_normal(4, 6, 1.0, rng);
  Matrix f = random_normal(2, 6, 1.0, rng);
  for (auto& v : f.data()) v *= 3.0;
  const Matrix p = route(f, {w});
  for (std::size_t i = 0; i < 2; ++i) {
    double z[4], m = -1e300, s = 0.0;
    for (std::size_t n = 0; n < 4; ++n) {
      z[n] = 0.0;
      for (std::size_t j = 0; j < 6; ++j) z[n] += w(n, j) * f(i, j);
      m = std::max(m, z[n]);
    }
    for (double& v : z) s += std::exp(v - m);
    for (std::size_t n = 0; n < 4; ++n) EXPECT_NEAR(p(i, n), std::exp(z[n] - m) / s, 1e-14);
  }
}

TEST(TopK, RenormalizeExample) {
  const Vector out = topk_renormalize(Vector{0.5, 0.3, 0.15, 0.05}, 2);
  EXPECT_DOUBLE_EQ(out[0], 0.625);
  EXPECT_DOUBLE_EQ(out[1], 0.375);
  EXPECT_EQ(out[2], 0.0);
  EXPECT_EQ(out[3], 0.0);
}

TEST(TopK, FullKIsIdentity) {
  const Vector row{0.1, 0.2, 0.3, 0.4};
  const Vector out = topk_renormalize(row, 4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[i], row[i], 1e-15);
}

TEST(TopK, TiesGoToLowestIndex) {
  const Vector out = topk_renormalize(Vector{0.25, 0.25, 0.25, 0.25}, 2);
  EXPECT_EQ(out, (Vector{0.5, 0.5, 0.0, 0.0}));
  EXPECT_EQ(topk_indices(Vector{0.1, 0.4, 0.1, 0.4}, 3), (std::vector<std::size_t>{1, 3, 0}));
}

TEST(TopK, MatchesBruteForceOnRandomRows) {
  SeededRng rng(17);
  for (int t = 0; t < 2000; ++t) {
    const std::size_t K = 1 + rng.below(8);
    const std::size_t k = 1 + rng.below(K);
    Vector row(K);
    for (auto& v : row) v = static_cast<double>(rng.below(5)) / 4.0 + 0.01;  // frequent ties
    const Vector out = topk_renormalize(row, k);
    std::size_t nz = 0;
    double sum = 0.0;
    for (double v : out) {
      nz += v != 0.0;
      sum += v;
    }
    EXPECT_EQ(nz, k);
    EXPECT_NEAR(sum, 1.0, 1e-12);
    // Brute force: an index is selected iff fewer than k entries beat it, counting equal entries at lower indices.
    for (std::size_t i = 0; i < K; ++i) {
      std::size_t ahead = 0;
      for (std::size_t j = 0; j < K; ++j) ahead += row[j] > row[i] || (row[j] == row[i] && j < i);
      EXPECT_EQ(out[i] != 0.0, ahead < k);
    }
  }
}

TEST(TopK, ScaleConsistent) {
  SeededRng rng(19);
  for (int t = 0; t < 200; ++t) {
    Vector row(6);
    for (auto& v : row) v = rng.uniform(0.01, 1.0);
    const Vector a = topk_renormalize(row, 3);
    const double c = rng.uniform(0.1, 50.0);
    for (auto& v : row) v *= c;
    const Vector b = topk_renormalize(row, 3);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
  }
}

TEST(TopK, RouteTopkWeightsAreRenormalizedProbs) {
  SeededRng rng(5);
  const Matrix f = random_normal(7, 5, 1.0, rng);
  const RouterParams r{random_normal(4, 5, 1.0, rng)};
  const RoutingResult res = route_topk(f, r, 2);
  for (std::size_t i = 0; i < 7; ++i) {
    const Vector ref = topk_renormalize(res.probs.row(i), 2);
    for (std::size_t n = 0; n < 4; ++n) EXPECT_NEAR(res.topk_weights(i, n), ref[n], 1e-15);
    EXPECT_EQ(res.topk_indices[i], topk_indices(res.probs.row(i), 2));
  }
}

TEST(Balance, UniformLoadsGiveZero) {
  EXPECT_NEAR(balance_loss({one_hot_loads({1, 1, 1, 1})}), 0.0, 1e-15);
}

TEST(Balance, CollapsedLoadsGiveThree) {
  // mu = 1, population variance = (9 + 1 + 1 + 1) / 4 = 3.
  EXPECT_NEAR(balance_loss({one_hot_loads({4, 0, 0, 0})}), 3.0, 1e-5);
  EXPECT_NEAR(balance_loss({one_hot_loads({4, 0, 0, 0})}, 0.0), 3.0, 1e-15);
}

TEST(Balance, SumsOverLevels) {
  SeededRng rng(6);
  const Matrix p = random_probs(9, 4, rng);
  EXPECT_DOUBLE_EQ(balance_loss({p, p}), 2.0 * balance_loss({p}));
}

TEST(Balance, NonNegativeAndZeroOnlyWhenBalanced) {
  SeededRng rng(7);
  for (int t = 0; t < 200; ++t) {
    const Matrix p = random_probs(1 + rng.below(10), 2 + rng.below(5), rng);
    EXPECT_GE(balance_loss({p}), 0.0);
  }
  EXPECT_GT(balance_loss({one_hot_loads({2, 1, 1, 1})}), 1e-3);
}

TEST(Balance, DecreasesWhenLoadsAreAveragedPairwise) {
  SeededRng rng(8);
  for (int t = 0; t < 300; ++t) {
    Vector load(3);
    for (auto& b : load) b = rng.uniform(0.0, 10.0);
    const double before = cv_squared(load);
    const std::size_t i = rng.below(3), j = (i + 1 + rng.below(2)) % 3;
    const double a = rng.uniform(0.05, 0.5);  // move a fraction of the way toward the pair mean
    const double mean = 0.5 * (load[i] + load[j]);
    load[i] += a * (mean - load[i]);
    load[j] += a * (mean - load[j]);
    EXPECT_LE(cv_squared(load), before + 1e-15);
  }
}

TEST(BalanceGrad, UniformLoadsGiveEqualColumns) {
  const auto g = balance_loss_grad({one_hot_loads({2, 2, 2})}).front();
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 1; j < g.cols(); ++j) EXPECT_NEAR(g(i, j), g(i, 0), 1e-15);
}

TEST(BalanceGrad, MatchesFiniteDifferencesTinyCase) {
  Matrix p(1, 2);
  p(0, 0) = 0.7;
  p(0, 1) = 0.3;
  auto loss = [&] { return balance_loss({p}); };
  const auto g = balance_loss_grad({p}).front();
  const auto r = finite_diff_check(loss, p.data(), g.data());
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(BalanceGrad, MatchesFiniteDifferencesRandom) {
  SeededRng rng(9);
  for (int t = 0; t < 20; ++t) {
    Matrix a = random_probs(6, 4, rng), b = random_probs(6, 4, rng);
    auto loss = [&] { return balance_loss({a, b}); };
    const auto g = balance_loss_grad({a, b});
    EXPECT_TRUE(finite_diff_check(loss, a.data(), g[0].data()).passed);
    EXPECT_TRUE(finite_diff_check(loss, b.data(), g[1].data()).passed);
  }
}

TEST(BalanceGrad, OverloadedColumnHasPositiveGradient) {
  Matrix p = one_hot_loads({4, 0, 0, 0});
  const auto g = balance_loss_grad({p}).front();
  auto loss = [&] { return balance_loss({p}); };
  const double h = 1e-5;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    EXPECT_GT(g(i, 0), 0.0);
    const double orig = p(i, 0);
    p(i, 0) = orig + h;
    const double up = loss();
    p(i, 0) = orig - h;
    const double down = loss();
    p(i, 0) = orig;
    EXPECT_GT((up - down) / (2 * h), 0.0);
  }
}

TEST(RouteBackward, MatchesFiniteDifferences) {
  // Loss = sum_n c_n w_n(z) + sum_n q_n p_n(z) at a fixed selection.
  SeededRng rng(10);
  for (int t = 0; t < 50; ++t) {
    const std::size_t K = 2 + rng.below(5), k = 1 + rng.below(K);
    Vector z(K), c(K), q(K);
    for (auto& v : z) v = rng.normal();
    for (auto& v : c) v = rng.normal();
    for (auto& v : q) v = rng.normal();
    const auto sel = topk_indices(softmax(z), k);
    auto loss = [&] {
      const Vector p = softmax(z);
      double total = 0.0, s = 0.0;
      for (auto n : sel) s += p[n];
      for (auto n : sel) total += c[n] * p[n] / s;
      return total + dot(q, p);
    };
    const Vector p = softmax(z);
    Vector w(K, 0.0);
    double s = 0.0;
    for (auto n : sel) s += p[n];
    for (auto n : sel) w[n] = p[n] / s;
    const Vector dz = route_backward_row(p, w, sel, c, q);
    EXPECT_TRUE(finite_diff_check(loss, z, dz).passed);
  }
}
