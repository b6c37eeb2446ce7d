#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "moeclip/training.hpp"

using namespace moeclip;

namespace {

/// Per-image mean backbone feature, concatenated over levels.
Vector descriptor(const SyntheticSample& s, std::size_t side, const ToyBackbone& bb) {
  Vector v;
  for (const Matrix& f : extract_features(s.image, side, side, bb)) {
    Vector mu(f.cols(), 0.0);
    for (std::size_t i = 0; i < f.rows(); ++i) axpy(1.0 / static_cast<double>(f.rows()), f.row(i), mu);
    v.insert(v.end(), mu.begin(), mu.end());
  }
  return v;
}

}  // namespace

TEST(SynthData, MaskMatchesLabel) {
  SeededRng rng(1);
  DataOptions opt;
  const Dataset ds = gen_dataset(5, 40, opt, rng);
  ASSERT_EQ(ds.size(), 200u);
  std::size_t anomalous = 0;
  for (const auto& s : ds.samples) {
    const bool any = std::any_of(s.mask.begin(), s.mask.end(), [](auto m) { return m != 0; });
    EXPECT_EQ(s.label, any ? 1 : 0);
    EXPECT_EQ(s.image.size(), 64u * 64u);
    EXPECT_EQ(s.mask.size(), 64u * 64u);
    anomalous += s.label;
  }
  EXPECT_GT(anomalous, 60u);
  EXPECT_LT(anomalous, 140u);
}

TEST(SynthData, AnomalyAreaWithinRange) {
  SeededRng rng(2);
  DataOptions opt;
  opt.anomaly_rate = 1.0;
  for (const auto& s : gen_dataset(3, 30, opt, rng).samples) {
    const double frac = static_cast<double>(std::count(s.mask.begin(), s.mask.end(), 1)) / (64.0 * 64.0);
    // Rounding of rectangle sides and disc rasterization stretch the nominal range a little.
    EXPECT_GT(frac, 0.5 * opt.min_area);
    EXPECT_LT(frac, 1.5 * opt.max_area);
  }
}

TEST(SynthData, AnomalyRateExtremes) {
  SeededRng rng(3);
  DataOptions opt;
  opt.anomaly_rate = 0.0;
  for (const auto& s : gen_dataset(2, 10, opt, rng).samples) EXPECT_EQ(s.label, 0);
  opt.anomaly_rate = 1.0;
  for (const auto& s : gen_dataset(2, 10, opt, rng).samples) EXPECT_EQ(s.label, 1);
}

TEST(SynthData, NormalSamplesAreStationaryTextures) {
  // A normal image's mean sits at the class brightness; anomalies leave it unchanged on average.
  SeededRng rng(4);
  DataOptions opt;
  opt.anomaly_rate = 0.0;
  for (std::size_t c = 0; c < 5; ++c) {
    const ClassTexture tex = class_texture(opt.texture_seed, c);
    const SyntheticSample s = make_sample(c, false, opt, rng);
    double mean = 0.0;
    for (double v : s.image) mean += v / static_cast<double>(s.image.size());
    EXPECT_NEAR(mean, tex.brightness, 0.03) << c;
  }
}

TEST(SynthData, ClassTexturesDependOnlyOnSeedAndClass) {
  for (std::size_t c = 0; c < 8; ++c) {
    const ClassTexture a = class_texture(7, c), b = class_texture(7, c);
    EXPECT_EQ(a.frequency, b.frequency);
    EXPECT_EQ(a.orientation, b.orientation);
    EXPECT_EQ(a.brightness, b.brightness);
    EXPECT_GE(a.frequency, 0.05);
    EXPECT_LE(a.frequency, 0.11);
    EXPECT_GE(a.brightness, 0.35);
    EXPECT_LE(a.brightness, 0.65);
  }
  EXPECT_NE(class_texture(7, 0).orientation, class_texture(8, 0).orientation);
}

TEST(SynthData, ClassBrightnessesAreSpreadOut) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<double> b;
    for (std::size_t c = 0; c < 5; ++c) b.push_back(class_texture(seed, c).brightness);
    std::sort(b.begin(), b.end());
    for (std::size_t i = 1; i < b.size(); ++i) EXPECT_GT(b[i] - b[i - 1], 0.03) << seed;
  }
}

TEST(SynthData, SameSeedSameDataset) {
  SeededRng a(9), b(9), c(10);
  DataOptions opt;
  const Dataset da = gen_dataset(3, 5, opt, a), db = gen_dataset(3, 5, opt, b), dc = gen_dataset(3, 5, opt, c);
  EXPECT_EQ(da, db);
  EXPECT_NE(da, dc);
}

TEST(SynthData, InvalidOptionsThrow) {
  SeededRng rng(0);
  DataOptions opt;
  opt.image_size = 60;
  EXPECT_THROW(gen_dataset(2, 2, opt, rng), DomainError);
  opt = {};
  opt.min_area = 0.2;
  EXPECT_THROW(gen_dataset(2, 2, opt, rng), DomainError);
  opt = {};
  opt.anomaly_rate = 1.5;
  EXPECT_THROW(gen_dataset(2, 2, opt, rng), DomainError);
}

TEST(Splits, SeenAndUnseenClassesAreDisjoint) {
  TrainConfig c;
  const Dataset train = make_train_set(c), test = make_test_set(c);
  EXPECT_EQ(train.size(), c.n_train);
  EXPECT_EQ(test.size(), c.n_test_per_class * (c.n_classes - c.n_seen));
  std::set<std::size_t> seen, unseen;
  for (const auto& s : train.samples) seen.insert(s.class_id);
  for (const auto& s : test.samples) unseen.insert(s.class_id);
  EXPECT_EQ(seen, (std::set<std::size_t>{0, 1, 2}));
  EXPECT_EQ(unseen, (std::set<std::size_t>{3, 4}));
}

TEST(Splits, TestSetHasBothLabelsPerClass) {
  const Dataset test = make_test_set(TrainConfig{});
  for (std::size_t c : {3u, 4u}) {
    std::size_t pos = 0, neg = 0;
    for (const auto& s : test.samples)
      if (s.class_id == c) (s.label ? pos : neg) += 1;
    EXPECT_GT(pos, 5u);
    EXPECT_GT(neg, 5u);
  }
}

TEST(Backbone, PatchesInRasterOrder) {
  SeededRng rng(5);
  const ToyBackbone bb = make_backbone(4, 2, 1, rng);
  Vector image(16);
  for (std::size_t i = 0; i < 16; ++i) image[i] = static_cast<double>(i);
  const Matrix f = extract_features(image, 4, 4, bb).front();
  ASSERT_EQ(f.rows(), 4u);
  // Patch (row 1, col 0) covers pixels 8, 9, 12, 13.
  const Vector patch{8, 9, 12, 13};
  const Vector ref = matvec(bb.levels[0], patch);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(f(2, j), ref[j], 1e-14);
  EXPECT_THROW(extract_features(Vector(15), 3, 5, bb), ShapeError);
}

TEST(Backbone, ClassesSeparableByNearestCentroid) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    TrainConfig c;
    c.seed = seed;
    SeededRng rng(seed);
    const ToyBackbone bb = make_backbone(c.dim, c.patch_size, c.n_levels, rng);
    const std::vector<std::size_t> all{0, 1, 2, 3, 4};
    const Dataset fit = gen_split(all, 100, data_options(c), 1000 + seed);
    const Dataset held = gen_split(all, 100, data_options(c), 2000 + seed);
    std::vector<Vector> centroid(5);
    std::vector<double> count(5, 0.0);
    for (const auto& s : fit.samples) {
      const Vector d = descriptor(s, fit.height, bb);
      if (centroid[s.class_id].empty()) centroid[s.class_id].assign(d.size(), 0.0);
      axpy(1.0, d, centroid[s.class_id]);
      count[s.class_id] += 1.0;
    }
    for (std::size_t k = 0; k < 5; ++k)
      for (auto& x : centroid[k]) x /= count[k];
    std::size_t correct = 0;
    for (const auto& s : held.samples) {
      const Vector d = descriptor(s, held.height, bb);
      std::size_t best = 0;
      double best_dist = 1e300;
      for (std::size_t k = 0; k < 5; ++k) {
        Vector diff = d;
        axpy(-1.0, centroid[k], diff);
        if (const double e = dot(diff, diff); e < best_dist) {
          best_dist = e;
          best = k;
        }
      }
      correct += best == s.class_id;
    }
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(held.size()), 0.95) << seed;
  }
}

TEST(Anchors, UnitNormAndNearlyOrthogonal) {
  SeededRng rng(6);
  for (int t = 0; t < 50; ++t) {
    const TextAnchors a = make_anchors(16, rng);
    EXPECT_NEAR(norm(a.normal), 1.0, 1e-12);
    EXPECT_NEAR(norm(a.anomaly), 1.0, 1e-12);
    EXPECT_LE(std::abs(dot(a.normal, a.anomaly)), 0.2);
  }
  EXPECT_THROW(make_anchors(1, rng), DomainError);
}
