#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moeclip/adapter.hpp"
#include "moeclip/config.hpp"
#include "moeclip/heads.hpp"
#include "moeclip/losses.hpp"
#include "moeclip/paa.hpp"
#include "moeclip/synthdata.hpp"

namespace moeclip {

/// Trainable and frozen state attached to one backbone level.
struct LevelModel {
  RouterParams router;
  ExpertBank bank;  // A frozen, B trainable
  Matrix proj;      // d x d, shared across scales
};

struct Model {
  TrainConfig config;
  ToyBackbone backbone;  // frozen
  TextAnchors anchors;   // frozen
  std::vector<LevelModel> levels;
  HeadParams head;
};

struct LevelGrads {
  Matrix router;
  std::vector<Matrix> B;
  Matrix proj;
};

struct ModelGrads {
  std::vector<LevelGrads> levels;
  HeadParams head;

  static ModelGrads zeros_like(const Model& m) {
    ModelGrads g;
    for (const auto& lv : m.levels) {
      LevelGrads lg;
      lg.router = Matrix(lv.router.weight.rows(), lv.router.weight.cols());
      for (const auto& e : lv.bank.experts) lg.B.emplace_back(e.B.rows(), e.B.cols());
      lg.proj = Matrix(lv.proj.rows(), lv.proj.cols());
      g.levels.push_back(std::move(lg));
    }
    g.head = HeadParams::zeros_like(m.head);
    return g;
  }
};

/// Calls f(name, span) for every trainable tensor, in a fixed order.
template <class F>
void for_each_trainable(Model& m, F&& f) {
  for (std::size_t l = 0; l < m.levels.size(); ++l) {
    auto& lv = m.levels[l];
    const std::string p = "level" + std::to_string(l) + ".";
    f(p + "router", lv.router.weight.data());
    for (std::size_t n = 0; n < lv.bank.size(); ++n) f(p + "expert" + std::to_string(n) + ".B", lv.bank.experts[n].B.data());
    f(p + "proj", lv.proj.data());
  }
  f(std::string("head.dw"), m.head.dw.data());
  f(std::string("head.pw"), m.head.pw.data());
  f(std::string("head.ln_gain"), std::span<double>(m.head.ln_gain));
  f(std::string("head.ln_bias"), std::span<double>(m.head.ln_bias));
}

/// Same order and names as for_each_trainable.
template <class F>
void for_each_grad(ModelGrads& g, F&& f) {
  for (std::size_t l = 0; l < g.levels.size(); ++l) {
    auto& lv = g.levels[l];
    const std::string p = "level" + std::to_string(l) + ".";
    f(p + "router", lv.router.data());
    for (std::size_t n = 0; n < lv.B.size(); ++n) f(p + "expert" + std::to_string(n) + ".B", lv.B[n].data());
    f(p + "proj", lv.proj.data());
  }
  f(std::string("head.dw"), g.head.dw.data());
  f(std::string("head.pw"), g.head.pw.data());
  f(std::string("head.ln_gain"), std::span<double>(g.head.ln_gain));
  f(std::string("head.ln_bias"), std::span<double>(g.head.ln_bias));
}

/// Calls f(name, span) for every frozen tensor.
template <class F>
void for_each_frozen(Model& m, F&& f) {
  for (std::size_t l = 0; l < m.backbone.levels.size(); ++l)
    f("backbone.level" + std::to_string(l), m.backbone.levels[l].data());
  for (std::size_t l = 0; l < m.levels.size(); ++l)
    for (std::size_t n = 0; n < m.levels[l].bank.size(); ++n)
      f("level" + std::to_string(l) + ".expert" + std::to_string(n) + ".A", m.levels[l].bank.experts[n].A.data());
  f(std::string("anchors.normal"), std::span<double>(m.anchors.normal));
  f(std::string("anchors.anomaly"), std::span<double>(m.anchors.anomaly));
}

inline ModelGrads& operator+=(ModelGrads& a, const ModelGrads& b) {
  std::vector<std::span<const double>> src;
  for_each_grad(const_cast<ModelGrads&>(b), [&](const std::string&, std::span<double> s) { src.push_back(s); });
  std::size_t i = 0;
  for_each_grad(a, [&](const std::string&, std::span<double> s) { axpy(1.0, src[i++], s); });
  return a;
}

inline void scale_grads(ModelGrads& g, double s) {
  for_each_grad(g, [&](const std::string&, std::span<double> v) {
    for (auto& x : v) x *= s;
  });
}

/// Fresh model. Draw order: backbone, anchors, then per level router/experts/projection, then head.
inline Model init_model(const TrainConfig& cfg) {
  validate(cfg);
  SeededRng rng(derive_seed(cfg.seed, 0x1A17ULL));
  Model m;
  m.config = cfg;
  const std::size_t d = cfg.dim;
  m.backbone = make_backbone(d, cfg.patch_size, cfg.n_levels, rng);
  m.anchors = make_anchors(d, rng);
  for (std::size_t l = 0; l < cfg.n_levels; ++l) {
    LevelModel lv;
    lv.router.weight = random_normal(cfg.num_experts, d, 0.01, rng);
    lv.bank = cfg.use_fofs ? fofs_init(d, cfg.num_experts, cfg.rank, rng, cfg.expert_alpha(), cfg.dropout)
                           : dense_init(d, cfg.num_experts, cfg.rank, rng, cfg.expert_alpha(), cfg.dropout);
    lv.proj = Matrix::identity(d);
    for (auto& v : lv.proj.data()) v += 0.01 * rng.normal();
    m.levels.push_back(std::move(lv));
  }
  m.head.dw = Matrix(d, 3);
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t t = 0; t < 3; ++t) m.head.dw(c, t) = 0.01 * rng.normal();
    m.head.dw(c, 1) += 1.0;
  }
  m.head.pw = Matrix::identity(d);
  for (auto& v : m.head.pw.data()) v += 0.01 * rng.normal();
  m.head.ln_gain.assign(d, 1.0);
  m.head.ln_bias.assign(d, 0.0);
  return m;
}

/// Which loss terms an objective includes, and with what weight.
struct ObjectiveWeights {
  double focal = 1.0;
  double dice = 1.0;
  double ac = 1.0;
  double etf = 0.01;
  double bal = 0.01;

  static ObjectiveWeights from_config(const TrainConfig& c) { return {1.0, 1.0, 1.0, c.lambda_etf, c.lambda_bal}; }
};

struct ForwardOptions {
  bool training = false;
  bool bypass_adapter = false;  // evaluate the frozen-feature baseline
};

struct ImageForward {
  std::vector<Matrix> features;         // per level, L x d
  std::vector<AdaptOutputs> adapt;      // per level (empty when bypassed)
  std::vector<Matrix> adapted;          // per level F_moe
  std::vector<std::vector<Matrix>> paa; // [level][scale]
  std::vector<std::vector<Matrix>> projected;
  std::vector<std::vector<AnomalyMap>> maps;
  Matrix head_input;  // final level PAA features averaged over scales
  HeadCache head_cache;
  Vector image_embedding;
  ScorePair score;

  /// Anomaly channel averaged over every (level, scale) map.
  Vector pixel_scores() const {
    Vector out(maps.front().front().anomaly.size(), 0.0);
    double count = 0.0;
    for (const auto& lv : maps)
      for (const auto& m : lv) {
        axpy(1.0, m.anomaly, out);
        count += 1.0;
      }
    for (auto& v : out) v /= count;
    return out;
  }

  std::vector<AnomalyMap> all_maps() const {
    std::vector<AnomalyMap> out;
    for (const auto& lv : maps) out.insert(out.end(), lv.begin(), lv.end());
    return out;
  }
};

inline AdaptOptions adapt_options(const TrainConfig& c, bool training) {
  return {c.top_k, c.lambda_moe, c.norm_eps, training};
}

/**
 * Full per-image forward: adapt every level, aggregate at every scale,
 * project and build the maps; the final level also feeds the image head.
 */
inline ImageForward forward(const Model& m, std::vector<Matrix> features, std::size_t out_h, std::size_t out_w,
                            const ForwardOptions& opt, SeededRng& rng) {
  const auto& cfg = m.config;
  detail::require_shape(features.size() == m.levels.size(), "forward: level count mismatch");
  ImageForward f;
  f.features = std::move(features);
  const std::size_t nl = m.levels.size();
  f.paa.resize(nl);
  f.projected.resize(nl);
  f.maps.resize(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    const auto& lv = m.levels[l];
    if (opt.bypass_adapter) {
      f.adapted.push_back(f.features[l]);
    } else {
      f.adapt.push_back(adapt_layer(f.features[l], lv.router, lv.bank, adapt_options(cfg, opt.training), rng));
      f.adapted.push_back(f.adapt.back().adapted);
    }
    for (auto s : cfg.scales) {
      f.paa[l].push_back(paa_aggregate(f.adapted[l], s));
      f.projected[l].push_back(project(f.paa[l].back(), lv.proj));
      f.maps[l].push_back(anomaly_map(f.projected[l].back(), m.anchors, cfg.tau, out_h, out_w));
    }
  }
  const auto& last = f.paa.back();
  f.head_input = Matrix(last.front().rows(), last.front().cols());
  for (const auto& p : last) axpy(1.0 / static_cast<double>(last.size()), p.data(), f.head_input.data());
  f.image_embedding = depthwise_head(f.head_input, m.head, &f.head_cache);
  f.score = anomaly_score(f.image_embedding, m.anchors, cfg.tau);
  return f;
}

inline ImageForward forward(const Model& m, const SyntheticSample& s, std::size_t height, std::size_t width,
                            const ForwardOptions& opt, SeededRng& rng) {
  return forward(m, extract_features(s.image, height, width, m.backbone), height, width, opt, rng);
}

/// Unweighted loss components of one image.
inline LossComponents image_losses(const Model& m, const ImageForward& f, std::span<const std::uint8_t> mask,
                                   std::uint8_t label, const ObjectiveWeights& w) {
  const auto& cfg = m.config;
  LossComponents c;
  for (const auto& lv : f.maps)
    for (const auto& map : lv) {
      if (w.focal != 0.0) c.seg += w.focal * focal_loss(true_class_probs(map, mask), cfg.gamma);
      if (w.dice != 0.0) c.seg += w.dice * dice_loss(map.anomaly, mask);
    }
  c.ac = bce_with_logit(f.score.logit, label);
  if (!f.adapt.empty()) {
    std::vector<Matrix> probs;
    for (const auto& a : f.adapt) {
      if (a.expert_outputs.experts() >= 2) c.etf += etf_loss(a.expert_outputs, cfg.norm_eps);
      probs.push_back(a.routing.probs);
    }
    c.bal = balance_loss(probs);
  }
  return c;
}

inline double image_objective(const Model& m, const ImageForward& f, std::span<const std::uint8_t> mask,
                              std::uint8_t label, const ObjectiveWeights& w) {
  const LossComponents c = image_losses(m, f, mask, label, w);
  return c.seg + w.ac * c.ac + w.etf * c.etf + w.bal * c.bal;
}

/// Gradient of image_objective with respect to every trainable tensor, accumulated into grads.
inline void image_backward(const Model& m, const ImageForward& f, std::span<const std::uint8_t> mask,
                           std::uint8_t label, const ObjectiveWeights& w, ModelGrads& grads) {
  const auto& cfg = m.config;
  const std::size_t nl = m.levels.size();
  std::vector<Matrix> d_adapted;
  for (std::size_t l = 0; l < nl; ++l) d_adapted.emplace_back(f.adapted[l].rows(), f.adapted[l].cols());

  for (std::size_t l = 0; l < nl; ++l)
    for (std::size_t si = 0; si < cfg.scales.size(); ++si) {
      const auto& map = f.maps[l][si];
      const Vector dmap = map_seg_loss_grad(map, mask, cfg.gamma, w.focal, w.dice);
      const Matrix dv = anomaly_map_backward(f.projected[l][si], m.anchors, cfg.tau, map, dmap);
      const Matrix dpaa = project_backward(f.paa[l][si], m.levels[l].proj, dv, grads.levels[l].proj);
      const Matrix dfeat = paa_grad(dpaa, cfg.scales[si]);
      axpy(1.0, dfeat.data(), d_adapted[l].data());
    }

  if (w.ac != 0.0) {
    const double dlogit = w.ac * bce_with_logit_grad(f.score.logit, label);
    const Vector demb = anomaly_score_backward(f.image_embedding, m.anchors, cfg.tau, dlogit);
    const Matrix dhead = depthwise_head_backward(f.head_input, m.head, f.head_cache, demb, grads.head);
    const double share = 1.0 / static_cast<double>(cfg.scales.size());
    for (auto s : cfg.scales) {
      const Matrix dfeat = paa_grad(dhead, s);
      axpy(share, dfeat.data(), d_adapted.back().data());
    }
  }

  if (f.adapt.empty()) return;
  for (std::size_t l = 0; l < nl; ++l) {
    const auto& lv = m.levels[l];
    const auto& a = f.adapt[l];
    ExpertOutputs d_experts;
    const bool use_etf = w.etf != 0.0 && lv.bank.size() >= 2;
    if (use_etf) {
      d_experts = etf_loss_grad(a.expert_outputs, cfg.norm_eps);
      for (auto& v : d_experts.data()) v *= w.etf;
    }
    Matrix d_probs;
    if (w.bal != 0.0) {
      d_probs = balance_loss_grad({a.routing.probs}).front();
      for (auto& v : d_probs.data()) v *= w.bal;
    }
    AdaptGrads ag = AdaptGrads::zeros_like(lv.router, lv.bank, a.adapted.rows());
    adapt_layer_backward(f.features[l], lv.router, lv.bank, adapt_options(cfg, false), a, d_adapted[l],
                         use_etf ? &d_experts : nullptr, w.bal != 0.0 ? &d_probs : nullptr, ag);
    axpy(1.0, ag.router.data(), grads.levels[l].router.data());
    for (std::size_t n = 0; n < ag.B.size(); ++n) axpy(1.0, ag.B[n].data(), grads.levels[l].B[n].data());
  }
}

}  // namespace moeclip
