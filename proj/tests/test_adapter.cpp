#include <gtest/gtest.h>

#include <cmath>

#include "moeclip/adapter.hpp"
#include "moeclip/gradcheck.hpp"

using namespace moeclip;

namespace {

struct Fixture {
  Matrix features;
  RouterParams router;
  ExpertBank bank;
};

Fixture make_fixture(std::size_t L, std::size_t d, std::size_t K, std::size_t r, std::uint64_t seed) {
  SeededRng rng(seed);
  Fixture f{random_normal(L, d, 1.0, rng), RouterParams{random_normal(K, d, 1.0, rng)}, fofs_init(d, K, r, rng)};
  for (auto& e : f.bank.experts)
    for (auto& v : e.B.data()) v = 0.5 * rng.normal();
  return f;
}

}  // namespace

TEST(Adapter, LambdaZeroIsBitwiseIdentity) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Fixture f = make_fixture(9, 8, 4, 2, seed);
    SeededRng rng(seed);
    const AdaptOutputs out = adapt_layer(f.features, f.router, f.bank, {2, 0.0, 1e-6, false}, rng);
    EXPECT_EQ(out.adapted, f.features);
  }
}

TEST(Adapter, LambdaOneConservesRowNorms) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Fixture f = make_fixture(9, 8, 4, 2, seed);
    SeededRng rng(seed);
    const AdaptOutputs out = adapt_layer(f.features, f.router, f.bank, {2, 1.0, 1e-6, false}, rng);
    for (std::size_t i = 0; i < 9; ++i) {
      const double nx = norm(f.features.row(i));
      const double rel = std::abs(norm(out.adapted.row(i)) - nx) / nx;
      EXPECT_LE(rel, 1e-6 / norm(out.mixed.row(i)) + 1e-14);
    }
  }
}

TEST(Adapter, NormMatchingHandValues) {
  // F = (3, 4) and a single expert emitting (0, 10): normalized to (0, 5).
  Fixture f{Matrix(1, 2), RouterParams{Matrix(1, 2)}, {}};
  f.features(0, 0) = 3;
  f.features(0, 1) = 4;
  ExpertParams e{Matrix::identity(2), Matrix(2, 2), 2.0, 2, 0.0};
  e.B(1, 0) = 2.0;
  e.B(1, 1) = 1.0;
  f.bank.experts.push_back(e);
  f.bank.subspace_dims = {2};
  SeededRng rng(0);
  const AdaptOutputs out = adapt_layer(f.features, f.router, f.bank, {1, 1.0, 1e-6, false}, rng);
  ASSERT_NEAR(out.mixed(0, 1), 10.0, 1e-15);
  EXPECT_EQ(out.adapted(0, 0), 0.0);
  EXPECT_NEAR(out.adapted(0, 1), 5.0, 1e-6);
  EXPECT_NEAR(out.adapted(0, 1), 50.0 / (10.0 + 1e-6), 1e-14);

  // lambda = 0.1 blend of (1, 0) with a unit expert output (0, 1) is (0.9, 0.1).
  f.features(0, 0) = 1;
  f.features(0, 1) = 0;
  f.bank.experts[0].B = Matrix(2, 2);
  f.bank.experts[0].B(1, 0) = 1.0;
  const AdaptOutputs b = adapt_layer(f.features, f.router, f.bank, {1, 0.1, 0.0, false}, rng);
  EXPECT_NEAR(b.adapted(0, 0), 0.9, 1e-15);
  EXPECT_NEAR(b.adapted(0, 1), 0.1, 1e-15);
}

TEST(Adapter, MixtureRescaledToInputNorm) {
  // The normalized mixture has the input norm and the direction of the raw mixture.
  const Fixture f = make_fixture(4, 8, 4, 2, 3);
  SeededRng rng(3);
  const AdaptOutputs out = adapt_layer(f.features, f.router, f.bank, {2, 1.0, 1e-6, false}, rng);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(cosine_sim(out.adapted.row(i), out.mixed.row(i)), 1.0, 1e-12);
}

TEST(Adapter, MixedIsTopkWeightedSum) {
  const Fixture f = make_fixture(9, 8, 4, 2, 4);
  SeededRng rng(4);
  const AdaptOutputs out = adapt_layer(f.features, f.router, f.bank, {2, 0.3, 1e-6, false}, rng);
  for (std::size_t i = 0; i < 9; ++i) {
    Vector ref(8, 0.0);
    for (std::size_t n = 0; n < 4; ++n) {
      const Vector y = expert_forward(f.features.row(i), f.bank.experts[n], false, rng);
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out.expert_outputs.at(i, n)[j], y[j], 1e-15);
      axpy(out.routing.topk_weights(i, n), y, ref);
    }
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out.mixed(i, j), ref[j], 1e-14);
  }
}

TEST(Adapter, ZeroMixtureFallsBackToScaledInput) {
  Fixture f = make_fixture(4, 8, 4, 2, 5);
  for (auto& e : f.bank.experts) e.B.fill(0.0);
  SeededRng rng(5);
  const AdaptOutputs out = adapt_layer(f.features, f.router, f.bank, {2, 0.25, 1e-6, false}, rng);
  for (std::size_t i = 0; i < f.features.size(); ++i) EXPECT_EQ(out.adapted.data()[i], 0.75 * f.features.data()[i]);
}

TEST(Adapter, BlendIsConvexInLambda) {
  const Fixture f = make_fixture(9, 8, 4, 2, 6);
  SeededRng rng(6);
  const auto full = adapt_layer(f.features, f.router, f.bank, {2, 1.0, 1e-6, false}, rng).adapted;
  const auto half = adapt_layer(f.features, f.router, f.bank, {2, 0.4, 1e-6, false}, rng).adapted;
  for (std::size_t i = 0; i < half.size(); ++i)
    EXPECT_NEAR(half.data()[i], 0.4 * full.data()[i] + 0.6 * f.features.data()[i], 1e-14);
}

TEST(Adapter, InvalidOptionsThrow) {
  const Fixture f = make_fixture(4, 8, 4, 2, 7);
  SeededRng rng(7);
  EXPECT_THROW(adapt_layer(f.features, f.router, f.bank, {0, 0.1, 1e-6, false}, rng), DomainError);
  EXPECT_THROW(adapt_layer(f.features, f.router, f.bank, {5, 0.1, 1e-6, false}, rng), DomainError);
  EXPECT_THROW(adapt_layer(f.features, f.router, f.bank, {2, 1.5, 1e-6, false}, rng), DomainError);
  EXPECT_THROW(adapt_layer(random_normal(4, 6, 1.0, rng), f.router, f.bank, {2, 0.1, 1e-6, false}, rng), ShapeError);
}

TEST(AdapterBackward, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Fixture f = make_fixture(4, 8, 4, 2, 100 + seed);
    SeededRng wrng(seed);
    const Matrix w = random_normal(4, 8, 1.0, wrng);
    ExpertOutputs we(4, 4, 8);
    for (auto& v : we.data()) v = wrng.normal();
    const Matrix wp = random_normal(4, 4, 1.0, wrng);
    const AdaptOptions opt{2, 0.6, 1e-6, false};

    auto loss = [&] {
      SeededRng rng(0);
      const AdaptOutputs o = adapt_layer(f.features, f.router, f.bank, opt, rng);
      return dot(o.adapted.data(), w.data()) + dot(o.expert_outputs.data(), we.data()) +
             dot(o.routing.probs.data(), wp.data());
    };
    SeededRng rng(0);
    const AdaptOutputs out = adapt_layer(f.features, f.router, f.bank, opt, rng);
    AdaptGrads g = AdaptGrads::zeros_like(f.router, f.bank, 4);
    adapt_layer_backward(f.features, f.router, f.bank, opt, out, w, &we, &wp, g);

    // Selection is piecewise constant; the check is only valid away from ties, which random draws avoid.
    EXPECT_TRUE(finite_diff_check(loss, f.features.data(), g.features.data(), 1e-5, 1e-4, "features").passed) << seed;
    EXPECT_TRUE(finite_diff_check(loss, f.router.weight.data(), g.router.data(), 1e-5, 1e-4, "router").passed) << seed;
    for (std::size_t n = 0; n < 4; ++n)
      EXPECT_TRUE(finite_diff_check(loss, f.bank.experts[n].B.data(), g.B[n].data(), 1e-5, 1e-4, "B").passed) << seed;
  }
}

TEST(AdapterBackward, FrozenAHasNoGradientSlot) {
  const Fixture f = make_fixture(4, 8, 4, 2, 8);
  const AdaptGrads g = AdaptGrads::zeros_like(f.router, f.bank, 4);
  ASSERT_EQ(g.B.size(), 4u);
  for (std::size_t n = 0; n < 4; ++n) {
    EXPECT_EQ(g.B[n].rows(), f.bank.experts[n].B.rows());
    EXPECT_EQ(g.B[n].cols(), f.bank.experts[n].B.cols());
  }
}
