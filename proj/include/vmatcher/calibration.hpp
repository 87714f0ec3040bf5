#pragma once

// Raw-score threshold for the dual-softmax-free matcher, chosen so that its
// coarse match sets agree with the probability-thresholded ones on as many
// calibration pairs as possible.

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "vmatcher/model.hpp"

namespace vmatcher {

template <typename T>
struct ScoredGrids {
  BasicTensor<T> scores;  // S [Na, Nb]
  GridSize grid_a, grid_b;
};

/// Coarse score matrix S of two images in inference mode.
template <typename T>
ScoredGrids<T> inference_scores(VMatcher<T>& model, const BasicTensor<T>& image_a, const BasicTensor<T>& image_b) {
  NoGradScope<T> no_grad;
  auto maps_a = model.extract(pad_to_multiple_of_8(image_a));
  auto maps_b = model.extract(pad_to_multiple_of_8(image_b));
  auto ta = VMatcher<T>::to_tokens(maps_a.f8);
  auto tb = VMatcher<T>::to_tokens(maps_b.f8);
  model.run_hybrid(ta, tb);
  return {model.score_matrix(ta, tb), ta.grid, tb.grid};
}

/// Interval (lo, hi] of raw thresholds for which the optimized selection
/// reproduces the standard match set of this pair; empty when lo >= hi.
template <typename T>
std::pair<double, double> agreement_interval(const ScoredGrids<T>& s, const ModelConfig& cfg) {
  ModelConfig standard_cfg = cfg;
  standard_cfg.optimized = false;
  const auto standard = select_coarse(standard_cfg, s.scores, s.grid_a, s.grid_b);
  auto raw = mnn_select(s.scores, -std::numeric_limits<double>::infinity());
  drop_border_matches(raw, s.grid_a, s.grid_b, cfg.border_cells);
  std::set<std::pair<std::size_t, std::size_t>> keep;
  for (const auto& m : standard) keep.insert({m.ia, m.ib});
  double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  std::size_t found = 0;
  for (const auto& m : raw) {
    if (keep.count({m.ia, m.ib})) {
      hi = std::min(hi, m.confidence);
      ++found;
    } else {
      lo = std::max(lo, m.confidence);
    }
  }
  if (found != keep.size()) return {0.0, 0.0};  // a standard match is not a raw-score MNN pair
  return {lo, hi};
}

/// The threshold contained in the most agreement intervals (lowest on ties).
inline double best_threshold(const std::vector<std::pair<double, double>>& intervals) {
  std::vector<double> candidates;
  for (const auto& [lo, hi] : intervals)
    if (lo < hi && std::isfinite(hi)) candidates.push_back(hi);
  if (candidates.empty()) return 0.0;
  std::sort(candidates.begin(), candidates.end());
  double best = candidates.front();
  std::size_t best_count = 0;
  for (double t : candidates) {
    std::size_t count = 0;
    for (const auto& [lo, hi] : intervals) count += (lo < t && t <= hi) ? 1 : 0;
    if (count > best_count) {
      best_count = count;
      best = t;
    }
  }
  return best;
}

}  // namespace vmatcher
