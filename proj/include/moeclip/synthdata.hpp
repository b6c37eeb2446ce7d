#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "moeclip/heads.hpp"
#include "moeclip/linalg.hpp"
#include "moeclip/rng.hpp"

namespace moeclip {

struct SyntheticSample {
  Vector image;                     // height x width, row-major
  std::vector<std::uint8_t> mask;   // 1 on anomalous pixels
  std::uint8_t label = 0;           // 1 iff mask has a positive pixel
  std::size_t class_id = 0;

  friend bool operator==(const SyntheticSample&, const SyntheticSample&) = default;
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<SyntheticSample> samples;

  std::size_t size() const { return samples.size(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Procedural texture of one object class: a sinusoid grating plus pixel noise.
struct ClassTexture {
  double frequency = 0.1;   // cycles per pixel
  double orientation = 0.0; // radians
  double brightness = 0.5;
  double amplitude = 0.15;
  double noise = 0.02;
};

/// Class parameters depend only on (texture_seed, class_id), so every split agrees on what a class looks like.
inline ClassTexture class_texture(std::uint64_t texture_seed, std::size_t class_id) {
  SeededRng rng(derive_seed(texture_seed, 0x7E47ULL + class_id));
  ClassTexture t;
  t.frequency = rng.uniform(0.05, 0.11);
  t.orientation = rng.uniform(0.0, std::numbers::pi);
  // Golden-ratio spacing keeps the mean brightness of any two classes apart.
  const double offset = SeededRng(derive_seed(texture_seed, 0xB41ULL)).uniform();
  const double u = std::fmod(offset + static_cast<double>(class_id) * 0.6180339887498949, 1.0);
  t.brightness = 0.35 + 0.3 * u;
  return t;
}

struct DataOptions {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  double anomaly_rate = 0.5;
  double min_area = 0.02;  // anomaly area as a fraction of the image
  double max_area = 0.15;
  std::uint64_t texture_seed = 0;
};

namespace detail {
inline double grating(double x, double y, double freq, double theta, double phase) {
  return std::sin(2.0 * std::numbers::pi * freq * (x * std::cos(theta) + y * std::sin(theta)) + phase);
}
}  // namespace detail

/**
 * One sample of a class. Anomalous samples carry a rectangle or disc whose
 * grating has a shifted frequency, higher contrast and a tilted orientation;
 * mean brightness is unchanged. The mask marks exactly the replaced pixels.
 */
inline SyntheticSample make_sample(std::size_t class_id, bool anomalous, const DataOptions& opt, SeededRng& rng) {
  const std::size_t n = opt.image_size;
  const ClassTexture tex = class_texture(opt.texture_seed, class_id);
  SyntheticSample s;
  s.class_id = class_id;
  s.image.assign(n * n, 0.0);
  s.mask.assign(n * n, 0);

  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      s.image[y * n + x] = tex.brightness + tex.amplitude * detail::grating(double(x), double(y), tex.frequency,
                                                                            tex.orientation, phase);

  if (anomalous) {
    const double area = rng.uniform(opt.min_area, opt.max_area) * static_cast<double>(n * n);
    const bool disc = rng.bernoulli(0.5);
    const double freq = tex.frequency * rng.uniform(1.8, 2.6);
    const double amp = tex.amplitude * rng.uniform(2.0, 3.0);
    const double theta = tex.orientation + rng.uniform(-0.5, 0.5);
    const double aphase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    if (disc) {
      const double radius = std::sqrt(area / std::numbers::pi);
      const double lo = radius, hi = static_cast<double>(n) - radius;
      const double cx = rng.uniform(lo, hi), cy = rng.uniform(lo, hi);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
          if (dx * dx + dy * dy <= radius * radius) s.mask[y * n + x] = 1;
        }
    } else {
      const double aspect = rng.uniform(0.5, 2.0);
      auto w = static_cast<std::size_t>(std::clamp(std::round(std::sqrt(area * aspect)), 2.0, double(n)));
      auto h = static_cast<std::size_t>(std::clamp(std::round(area / double(w)), 2.0, double(n)));
      const std::size_t x0 = rng.below(n - w + 1);
      const std::size_t y0 = rng.below(n - h + 1);
      for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x) s.mask[y * n + x] = 1;
    }
    for (std::size_t p = 0; p < n * n; ++p)
      if (s.mask[p])
        s.image[p] = tex.brightness + amp * detail::grating(double(p % n), double(p / n), freq, theta, aphase);
  }
  for (auto& v : s.image) v += tex.noise * rng.normal();
  s.label = std::any_of(s.mask.begin(), s.mask.end(), [](std::uint8_t m) { return m != 0; }) ? 1 : 0;
  return s;
}

/// n_per_class samples of each listed class, each drawn from its own derived seed.
inline Dataset gen_dataset(const std::vector<std::size_t>& class_ids, std::size_t n_per_class, const DataOptions& opt,
                           SeededRng& rng) {
  detail::require_domain(opt.image_size > 0 && opt.patch_size > 0 && opt.image_size % opt.patch_size == 0,
                         "gen_dataset: image size must be a positive multiple of the patch size");
  detail::require_domain(opt.anomaly_rate >= 0.0 && opt.anomaly_rate <= 1.0, "gen_dataset: anomaly_rate outside [0,1]");
  detail::require_domain(opt.min_area > 0.0 && opt.min_area <= opt.max_area && opt.max_area < 1.0,
                         "gen_dataset: invalid anomaly area range");
  Dataset ds{opt.image_size, opt.image_size, {}};
  const std::uint64_t base = rng.next_u64();
  std::uint64_t stream = 0;
  for (auto c : class_ids)
    for (std::size_t j = 0; j < n_per_class; ++j) {
      SeededRng srng(derive_seed(base, stream++));
      const bool anomalous = srng.uniform() < opt.anomaly_rate;
      ds.samples.push_back(make_sample(c, anomalous, opt, srng));
    }
  return ds;
}

inline Dataset gen_dataset(std::size_t n_classes, std::size_t n_per_class, const DataOptions& opt, SeededRng& rng) {
  std::vector<std::size_t> ids(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) ids[c] = c;
  return gen_dataset(ids, n_per_class, opt, rng);
}

/// Frozen stand-in encoder: one random linear map per level from flattened patches to d features.
struct ToyBackbone {
  std::size_t patch_size = 8;
  std::vector<Matrix> levels;  // each d x patch_size^2

  std::size_t dim() const { return levels.empty() ? 0 : levels.front().rows(); }
};

inline ToyBackbone make_backbone(std::size_t d, std::size_t patch_size, std::size_t n_levels, SeededRng& rng) {
  ToyBackbone bb;
  bb.patch_size = patch_size;
  const std::size_t in = patch_size * patch_size;
  for (std::size_t l = 0; l < n_levels; ++l) bb.levels.push_back(random_normal(d, in, 1.0 / std::sqrt(double(in)), rng));
  return bb;
}

/// Non-overlapping p x p patches in raster order, flattened row-major, mapped through each level.
inline std::vector<Matrix> extract_features(std::span<const double> image, std::size_t height, std::size_t width,
                                            const ToyBackbone& bb) {
  const std::size_t p = bb.patch_size;
  detail::require_shape(image.size() == height * width, "extract_features: image size mismatch");
  detail::require_shape(p > 0 && height % p == 0 && width % p == 0, "extract_features: image not divisible by patch size");
  const std::size_t gh = height / p, gw = width / p;
  Matrix patches(gh * gw, p * p);
  for (std::size_t by = 0; by < gh; ++by)
    for (std::size_t bx = 0; bx < gw; ++bx) {
      auto r = patches.row(by * gw + bx);
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x) r[y * p + x] = image[(by * p + y) * width + bx * p + x];
    }
  std::vector<Matrix> out;
  out.reserve(bb.levels.size());
  for (const auto& w : bb.levels) out.push_back(matmul_nt(patches, w));
  return out;
}

/// Two random unit vectors whose cosine lies in [-0.2, 0.2].
inline TextAnchors make_anchors(std::size_t d, SeededRng& rng) {
  detail::require_domain(d >= 2, "make_anchors: need d >= 2");
  auto draw = [&] {
    Vector v(d);
    for (auto& x : v) x = rng.normal();
    return l2_normalize(v, 1e-12);
  };
  TextAnchors t;
  t.normal = draw();
  do {
    t.anomaly = draw();
  } while (std::abs(dot(t.normal, t.anomaly)) > 0.2);
  return t;
}

}  // namespace moeclip
