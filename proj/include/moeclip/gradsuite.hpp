#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moeclip/training.hpp"

namespace moeclip {

/// Small geometry for finite-difference checks: 3x3 patch grid, d = 8.
inline TrainConfig tiny_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.seed = seed;
  c.dim = 8;
  c.grid_side = 3;
  c.patch_size = 2;
  c.num_experts = 4;
  c.top_k = 2;
  c.rank = 2;
  c.scales = {1, 3};
  c.n_levels = 2;
  c.n_train = 2;
  c.lambda_moe = 0.5;
  return c;
}

struct GradSuiteEntry {
  std::string loss;
  GradCheckReport report;
};

struct NamedObjective {
  std::string name;
  ObjectiveWeights weights;
};

inline std::vector<NamedObjective> gradcheck_objectives(const TrainConfig& c) {
  return {{"focal", {1, 0, 0, 0, 0}}, {"dice", {0, 1, 0, 0, 0}}, {"bce", {0, 0, 1, 0, 0}},
          {"etf", {0, 0, 0, 1, 0}},   {"balance", {0, 0, 0, 0, 1}}, {"full", ObjectiveWeights::from_config(c)}};
}

/**
 * One tiny instance: random model and two images (one anomalous, one normal),
 * checked for every loss on its own and for the full objective. The router
 * and experts are drawn at a larger scale than at initialization so every
 * term carries a gradient that is well above finite-difference noise.
 * `corrupt` multiplies the analytic gradients (test hook).
 */
inline std::vector<GradSuiteEntry> gradcheck_suite(std::uint64_t seed, double tol = 1e-4, double corrupt = 1.0,
                                                   double h = 1e-5) {
  const TrainConfig cfg = tiny_config(seed);
  Model m = init_model(cfg);
  SeededRng rng(derive_seed(seed, 0x6C3CULL));
  for (auto& lv : m.levels) {
    for (auto& v : lv.router.weight.data()) v = rng.normal();
    for (auto& e : lv.bank.experts)
      for (auto& v : e.B.data()) v = 0.3 * rng.normal();
    for (auto& v : lv.proj.data()) v += 0.2 * rng.normal();
  }
  for (auto& v : m.head.dw.data()) v += 0.2 * rng.normal();
  for (auto& v : m.head.pw.data()) v += 0.2 * rng.normal();
  for (auto& v : m.head.ln_gain) v += 0.2 * rng.normal();
  for (auto& v : m.head.ln_bias) v = 0.2 * rng.normal();

  const DataOptions opt = data_options(cfg);
  Dataset ds{opt.image_size, opt.image_size, {}};
  ds.samples.push_back(make_sample(0, true, opt, rng));
  ds.samples.push_back(make_sample(1, false, opt, rng));

  std::vector<GradSuiteEntry> out;
  for (const auto& obj : gradcheck_objectives(cfg))
    for (auto& r : model_gradcheck(m, ds, obj.weights, h, tol, corrupt)) out.push_back({obj.name, std::move(r)});
  return out;
}

}  // namespace moeclip
