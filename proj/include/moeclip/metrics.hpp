#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <vector>

#include "moeclip/model.hpp"

namespace moeclip {

struct ScoredSet {
  Vector scores;
  std::vector<std::uint8_t> labels;

  void add(double score, std::uint8_t label) {
    scores.push_back(score);
    labels.push_back(label);
  }
  std::size_t size() const { return scores.size(); }
};

/// Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(tie), via tie-averaged ranks.
inline double auroc(const ScoredSet& set) {
  detail::require_shape(set.scores.size() == set.labels.size(), "auroc: scores/labels length mismatch");
  const std::size_t n = set.size();
  std::size_t pos = 0;
  for (auto l : set.labels) pos += l ? 1 : 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc: need at least one positive and one negative");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return set.scores[a] < set.scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && set.scores[idx[j]] == set.scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (set.labels[idx[t]]) rank_sum += avg_rank;
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

/**
 * Non-interpolated average precision: mean over positives of precision at
 * that positive's rank. Items are ranked by descending score; equal scores
 * keep their input order.
 */
inline double average_precision(const ScoredSet& set) {
  detail::require_shape(set.scores.size() == set.labels.size(), "average_precision: length mismatch");
  std::vector<std::size_t> idx(set.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return set.scores[a] > set.scores[b]; });
  double hits = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < idx.size(); ++r)
    if (set.labels[idx[r]]) {
      hits += 1.0;
      sum += hits / static_cast<double>(r + 1);
    }
  if (hits == 0.0) throw UndefinedMetricError("average_precision: no positives");
  return sum / hits;
}

struct SimilarityReport {
  Matrix similarity;                     // K x K, unit diagonal
  std::vector<std::vector<std::size_t>> excluded;  // images skipped per pair
};

/**
 * Inter-expert similarity. Per image, expert n's feature is the mean of its
 * outputs over the patches whose Top-k set contains n; entry (n, m) is the
 * cosine of those features averaged over images where both experts fired.
 */
inline SimilarityReport expert_similarity_report(const std::vector<const AdaptOutputs*>& per_image) {
  detail::require_domain(!per_image.empty(), "expert_similarity_report: no images");
  const std::size_t K = per_image.front()->expert_outputs.experts();
  const std::size_t d = per_image.front()->expert_outputs.dim();
  Matrix sum(K, K);
  std::vector<std::vector<std::size_t>> count(K, std::vector<std::size_t>(K, 0));
  std::vector<std::vector<std::size_t>> excluded(K, std::vector<std::size_t>(K, 0));
  for (const AdaptOutputs* a : per_image) {
    std::vector<Vector> feat(K, Vector(d, 0.0));
    std::vector<std::size_t> hits(K, 0);
    for (std::size_t i = 0; i < a->expert_outputs.patches(); ++i)
      for (auto n : a->routing.topk_indices[i]) {
        axpy(1.0, a->expert_outputs.at(i, n), feat[n]);
        ++hits[n];
      }
    for (std::size_t n = 0; n < K; ++n)
      for (std::size_t m = 0; m < K; ++m) {
        if (n == m) continue;
        if (hits[n] == 0 || hits[m] == 0) {
          ++excluded[n][m];
          continue;
        }
        sum(n, m) += cosine_sim(feat[n], feat[m]);  // the mean's scale does not change the cosine
        ++count[n][m];
      }
  }
  SimilarityReport rep{Matrix(K, K), excluded};
  for (std::size_t n = 0; n < K; ++n)
    for (std::size_t m = 0; m < K; ++m)
      rep.similarity(n, m) = n == m ? 1.0 : (count[n][m] ? sum(n, m) / static_cast<double>(count[n][m]) : 0.0);
  return rep;
}

inline double mean_off_diagonal(const Matrix& s) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < s.cols(); ++j)
      if (i != j) {
        total += s(i, j);
        ++n;
      }
  return n ? total / static_cast<double>(n) : 0.0;
}

/// Fraction of patches that place each expert in their Top-k set; shares sum to k.
struct UtilizationReport {
  Vector overall;
  std::map<std::size_t, Vector> per_class;
};

inline UtilizationReport utilization_report(const std::vector<const RoutingResult*>& routing,
                                            const std::vector<std::size_t>& class_ids) {
  detail::require_shape(routing.size() == class_ids.size(), "utilization_report: routing/class count mismatch");
  detail::require_domain(!routing.empty(), "utilization_report: no images");
  const std::size_t K = routing.front()->probs.cols();
  UtilizationReport rep;
  rep.overall.assign(K, 0.0);
  std::map<std::size_t, double> class_patches;
  double patches = 0.0;
  for (std::size_t img = 0; img < routing.size(); ++img) {
    auto& cls = rep.per_class.try_emplace(class_ids[img], Vector(K, 0.0)).first->second;
    for (const auto& sel : routing[img]->topk_indices) {
      for (auto n : sel) {
        rep.overall[n] += 1.0;
        cls[n] += 1.0;
      }
      patches += 1.0;
      class_patches[class_ids[img]] += 1.0;
    }
  }
  for (auto& v : rep.overall) v /= patches;
  for (auto& [c, v] : rep.per_class)
    for (auto& x : v) x /= class_patches[c];
  return rep;
}

}  // namespace moeclip
