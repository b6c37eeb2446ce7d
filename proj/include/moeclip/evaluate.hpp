#pragma once

#include <map>
#include <string>
#include <vector>

#include "moeclip/metrics.hpp"
#include "moeclip/model.hpp"
#include "moeclip/training.hpp"

namespace moeclip {

/// Per-image outputs of an evaluated model.
struct Predictions {
  std::vector<Vector> pixel;  // anomaly probability per pixel, averaged over levels and scales
  Vector image;               // S_A per image
};

inline Predictions predict(const Model& m, const Dataset& ds, bool bypass_adapter = false) {
  Predictions p;
  SeededRng rng(0);
  for (const auto& s : ds.samples) {
    const ImageForward f = forward(m, s, ds.height, ds.width, {false, bypass_adapter}, rng);
    p.pixel.push_back(f.pixel_scores());
    p.image.push_back(f.score.anomaly);
  }
  return p;
}

struct EvalRow {
  std::string name;
  double image_auroc = 0.0;
  double image_ap = 0.0;
  double pixel_auroc = 0.0;
  double pixel_ap = 0.0;
};

namespace detail {
inline double mean_or_zero(const Vector& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}
}  // namespace detail

/**
 * One row per class plus a final "mean" row averaging the class rows.
 * Pixel metrics pool every pixel of the class into one scored set unless
 * per_image_pixel is set, in which case they are averaged over the class's
 * anomalous images.
 */
inline std::vector<EvalRow> build_report(const Dataset& ds, const Predictions& pred, bool per_image_pixel = false) {
  detail::require_shape(pred.image.size() == ds.size() && pred.pixel.size() == ds.size(),
                        "build_report: prediction count != dataset size");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.samples[i].class_id].push_back(i);

  std::vector<EvalRow> rows;
  for (const auto& [cls, members] : by_class) {
    EvalRow row;
    row.name = "class" + std::to_string(cls);
    ScoredSet img;
    for (auto i : members) img.add(pred.image[i], ds.samples[i].label);
    row.image_auroc = auroc(img);
    row.image_ap = average_precision(img);
    if (per_image_pixel) {
      Vector aucs, aps;
      for (auto i : members) {
        if (!ds.samples[i].label) continue;
        ScoredSet px{pred.pixel[i], ds.samples[i].mask};
        aucs.push_back(auroc(px));
        aps.push_back(average_precision(px));
      }
      row.pixel_auroc = detail::mean_or_zero(aucs);
      row.pixel_ap = detail::mean_or_zero(aps);
    } else {
      ScoredSet px;
      for (auto i : members) {
        px.scores.insert(px.scores.end(), pred.pixel[i].begin(), pred.pixel[i].end());
        px.labels.insert(px.labels.end(), ds.samples[i].mask.begin(), ds.samples[i].mask.end());
      }
      row.pixel_auroc = auroc(px);
      row.pixel_ap = average_precision(px);
    }
    rows.push_back(row);
  }
  EvalRow mean{"mean"};
  for (const auto& r : rows) {
    mean.image_auroc += r.image_auroc / static_cast<double>(rows.size());
    mean.image_ap += r.image_ap / static_cast<double>(rows.size());
    mean.pixel_auroc += r.pixel_auroc / static_cast<double>(rows.size());
    mean.pixel_ap += r.pixel_ap / static_cast<double>(rows.size());
  }
  rows.push_back(mean);
  return rows;
}

/// Image and pixel AUROC with every image of the set pooled together.
struct PooledMetrics {
  double image_auroc = 0.0;
  double pixel_auroc = 0.0;
};

inline PooledMetrics pooled_metrics(const Dataset& ds, const Predictions& pred) {
  ScoredSet img, px;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    img.add(pred.image[i], ds.samples[i].label);
    px.scores.insert(px.scores.end(), pred.pixel[i].begin(), pred.pixel[i].end());
    px.labels.insert(px.labels.end(), ds.samples[i].mask.begin(), ds.samples[i].mask.end());
  }
  return {auroc(img), auroc(px)};
}

/// Routing and expert outputs of every image at every level (dropout off).
struct Specialization {
  std::vector<SimilarityReport> similarity;   // per level
  std::vector<UtilizationReport> utilization; // per level
  double load_cv2 = 0.0;                      // mean over images of the summed per-level CV^2

  double mean_similarity() const {
    double s = 0.0;
    for (const auto& r : similarity) s += mean_off_diagonal(r.similarity);
    return s / static_cast<double>(similarity.size());
  }
};

inline Specialization inspect_specialization(const Model& m, const Dataset& ds) {
  SeededRng rng(0);
  std::vector<ImageForward> fw;
  fw.reserve(ds.size());
  std::vector<std::size_t> classes;
  double cv2 = 0.0;
  for (const auto& s : ds.samples) {
    fw.push_back(forward(m, s, ds.height, ds.width, {false, false}, rng));
    classes.push_back(s.class_id);
    std::vector<Matrix> probs;
    for (const auto& a : fw.back().adapt) probs.push_back(a.routing.probs);
    cv2 += balance_loss(probs, m.config.norm_eps);
  }
  Specialization sp;
  sp.load_cv2 = cv2 / static_cast<double>(ds.size());
  for (std::size_t l = 0; l < m.levels.size(); ++l) {
    std::vector<const AdaptOutputs*> outs;
    std::vector<const RoutingResult*> routes;
    for (const auto& f : fw) {
      outs.push_back(&f.adapt[l]);
      routes.push_back(&f.adapt[l].routing);
    }
    sp.similarity.push_back(expert_similarity_report(outs));
    sp.utilization.push_back(utilization_report(routes, classes));
  }
  return sp;
}

}  // namespace moeclip
