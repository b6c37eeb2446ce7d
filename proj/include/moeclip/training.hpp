#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "moeclip/gradcheck.hpp"
#include "moeclip/model.hpp"
#include "moeclip/optim.hpp"

namespace moeclip {

/// Everything needed to resume or evaluate a run.
struct Checkpoint {
  Model model;
  AdamState adam;
  SeededRng rng;
  std::uint64_t step = 0;
};

struct StepRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  LossComponents parts;  // batch means
};

struct FitResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> trace;
};

inline DataOptions data_options(const TrainConfig& c) {
  DataOptions o;
  o.image_size = c.image_size();
  o.patch_size = c.patch_size;
  o.anomaly_rate = c.anomaly_rate;
  o.texture_seed = c.seed;
  return o;
}

/// `total` samples spread round-robin over the listed classes.
inline Dataset gen_split(const std::vector<std::size_t>& class_ids, std::size_t total, const DataOptions& opt,
                         std::uint64_t seed) {
  detail::require_domain(!class_ids.empty(), "gen_split: no classes");
  Dataset ds{opt.image_size, opt.image_size, {}};
  for (std::size_t j = 0; j < total; ++j) {
    SeededRng srng(derive_seed(seed, j));
    const bool anomalous = srng.uniform() < opt.anomaly_rate;
    ds.samples.push_back(make_sample(class_ids[j % class_ids.size()], anomalous, opt, srng));
  }
  return ds;
}

/// Seen-class auxiliary training set.
inline Dataset make_train_set(const TrainConfig& c) {
  return gen_split(c.seen_classes(), c.n_train, data_options(c), derive_seed(c.seed, 0xDA7AULL));
}

/// Unseen-class evaluation set, n_test_per_class images per class.
inline Dataset make_test_set(const TrainConfig& c) {
  const auto unseen = c.unseen_classes();
  return gen_split(unseen, c.n_test_per_class * unseen.size(), data_options(c), derive_seed(c.seed, 0x7E57ULL));
}

inline std::vector<std::vector<Matrix>> precompute_features(const Model& m, const Dataset& ds) {
  std::vector<std::vector<Matrix>> out;
  out.reserve(ds.size());
  for (const auto& s : ds.samples) out.push_back(extract_features(s.image, ds.height, ds.width, m.backbone));
  return out;
}

inline std::vector<std::span<double>> trainable_spans(Model& m) {
  std::vector<std::span<double>> v;
  for_each_trainable(m, [&](const std::string&, std::span<double> s) { v.push_back(s); });
  return v;
}

inline std::vector<std::span<const double>> grad_spans(ModelGrads& g) {
  std::vector<std::span<const double>> v;
  for_each_grad(g, [&](const std::string&, std::span<double> s) { v.push_back(s); });
  return v;
}

inline std::uint64_t total_steps(const TrainConfig& c, std::size_t n_samples) {
  const std::uint64_t per_epoch = (n_samples + c.batch_size - 1) / c.batch_size;
  return per_epoch * c.epochs;
}

using StepCallback = std::function<void(const StepRecord&)>;

/**
 * Train on the given (seen-class) dataset. Each step averages the objective
 * over a batch of images in fixed index order, backpropagates by hand and
 * applies one Adam update with multi-step learning-rate decay.
 */
inline FitResult fit(const TrainConfig& cfg, const Dataset& train, const StepCallback& on_step = {},
                     std::uint64_t max_steps = 0) {
  detail::require_domain(!train.samples.empty(), "fit: empty dataset");
  FitResult res;
  Checkpoint& ck = res.checkpoint;
  ck.model = init_model(cfg);
  ck.rng = SeededRng(derive_seed(cfg.seed, 0x75A1ULL));
  Model& m = ck.model;
  const auto features = precompute_features(m, train);
  const ObjectiveWeights w = ObjectiveWeights::from_config(cfg);
  const std::uint64_t steps = max_steps ? std::min(max_steps, total_steps(cfg, train.size())) : total_steps(cfg, train.size());
  const AdamHyper base{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs && ck.step < steps; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[ck.rng.below(i)]);
    for (std::size_t start = 0; start < order.size() && ck.step < steps; start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, order.size());
      const double inv = 1.0 / static_cast<double>(end - start);
      ModelGrads grads = ModelGrads::zeros_like(m);
      StepRecord rec;
      rec.epoch = epoch;
      for (std::size_t b = start; b < end; ++b) {
        const auto& s = train.samples[order[b]];
        const ImageForward f = forward(m, features[order[b]], train.height, train.width, {true, false}, ck.rng);
        const LossComponents c = image_losses(m, f, s.mask, s.label, w);
        rec.parts.seg += inv * c.seg;
        rec.parts.ac += inv * c.ac;
        rec.parts.etf += inv * c.etf;
        rec.parts.bal += inv * c.bal;
        ModelGrads g = ModelGrads::zeros_like(m);
        image_backward(m, f, s.mask, s.label, w, g);
        scale_grads(g, inv);
        grads += g;
      }
      rec.total = total_loss(rec.parts, {cfg.lambda_etf, cfg.lambda_bal, cfg.gamma});
      rec.step = ck.step;
      rec.lr = scheduled_lr(cfg.lr, ck.step, steps, cfg.lr_decay_milestones, cfg.lr_decay_factor);
      if (!std::isfinite(rec.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << rec.step << " (seg=" << rec.parts.seg << ", ac=" << rec.parts.ac
            << ", etf=" << rec.parts.etf << ", bal=" << rec.parts.bal << ")";
        throw NumericalError(msg.str());
      }
      AdamHyper h = base;
      h.lr = rec.lr;
      adam_step(trainable_spans(m), grad_spans(grads), ck.adam, h);
      ++ck.step;
      res.trace.push_back(rec);
      if (on_step) on_step(rec);
    }
  }
  return res;
}

/// Denominator floor for whole-model checks. Central differences of an O(10) loss at h = 1e-5 move in
/// steps of ~4e-10, so near-zero gradients are compared at an absolute 1e-8.
inline constexpr double kModelGradFloor = 1e-4;

/// Per-group finite-difference check of the full per-image objective (dropout off).
inline std::vector<GradCheckReport> model_gradcheck(Model& m, const Dataset& ds, const ObjectiveWeights& w,
                                                    double h = 1e-5, double tol = 1e-4, double corrupt = 1.0,
                                                    double floor = kModelGradFloor) {
  const auto features = precompute_features(m, ds);
  auto objective = [&]() {
    double total = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      SeededRng rng(0);
      const ImageForward f = forward(m, features[i], ds.height, ds.width, {false, false}, rng);
      total += image_objective(m, f, ds.samples[i].mask, ds.samples[i].label, w);
    }
    return total;
  };
  ModelGrads grads = ModelGrads::zeros_like(m);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    SeededRng rng(0);
    const ImageForward f = forward(m, features[i], ds.height, ds.width, {false, false}, rng);
    image_backward(m, f, ds.samples[i].mask, ds.samples[i].label, w, grads);
  }
  if (corrupt != 1.0) scale_grads(grads, corrupt);
  std::vector<std::span<double>> gspans;
  for_each_grad(grads, [&](const std::string&, std::span<double> s) { gspans.push_back(s); });
  std::vector<GradCheckReport> reports;
  std::size_t k = 0;
  for_each_trainable(m, [&](const std::string& name, std::span<double> p) {
    reports.push_back(finite_diff_check(objective, p, gspans[k++], h, tol, name, floor));
  });
  return reports;
}

}  // namespace moeclip
