#pragma once

// Ground truth from a known homography and the matching losses.

#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "vmatcher/homography.hpp"
#include "vmatcher/ops.hpp"

namespace vmatcher {

/// Coarse cell c (row-major over a grid of width gw) has its centre at full
/// pixel (8 cx + 3.5, 8 cy + 3.5).
inline Point2 cell_centre(std::size_t cell, std::size_t grid_w) {
  return {8.0 * static_cast<double>(cell % grid_w) + 3.5, 8.0 * static_cast<double>(cell / grid_w) + 3.5};
}

/// Fine (1/2 resolution) pixel u covers full pixels 2u and 2u+1.
inline double fine_to_full(double u) { return 2.0 * u + 0.5; }
inline double full_to_fine(double x) { return (x - 0.5) / 2.0; }

struct GridSize {
  std::size_t h = 0;  // coarse rows
  std::size_t w = 0;  // coarse cols
  std::size_t cells() const { return h * w; }
  std::size_t image_h() const { return 8 * h; }
  std::size_t image_w() const { return 8 * w; }
};

struct GroundTruth {
  std::vector<std::pair<std::size_t, std::size_t>> coarse_pairs;  // (ia, ib), ordered by ia
  std::vector<Point2> fine_targets;                               // warped cell centre of ia in B, full pixels
  Homography h = Homography::Identity();
};

/// Each A cell centre is warped into B; it pairs with the B cell whose centre
/// lies within half a cell width on both axes, provided the point is inside B.
/// When several A cells reach the same B cell only the one landing closest
/// to that centre is kept (ties go to the lower A index).
inline GroundTruth gt_from_homography(const Homography& h, GridSize a, GridSize b) {
  GroundTruth gt;
  gt.h = h;
  constexpr std::size_t none = static_cast<std::size_t>(-1);
  std::vector<std::size_t> owner(b.cells(), none);
  std::vector<double> owner_dist(b.cells(), std::numeric_limits<double>::infinity());
  std::vector<std::size_t> target(a.cells(), none);
  std::vector<Point2> warped(a.cells());
  for (std::size_t ia = 0; ia < a.cells(); ++ia) {
    const Point2 p = apply(h, cell_centre(ia, a.w));
    warped[ia] = p;
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) continue;
    if (p.x < 0 || p.y < 0 || p.x > static_cast<double>(b.image_w()) - 1.0 ||
        p.y > static_cast<double>(b.image_h()) - 1.0)
      continue;
    const double cx = std::round((p.x - 3.5) / 8.0), cy = std::round((p.y - 3.5) / 8.0);
    if (cx < 0 || cy < 0 || cx >= static_cast<double>(b.w) || cy >= static_cast<double>(b.h)) continue;
    const std::size_t ib = static_cast<std::size_t>(cy) * b.w + static_cast<std::size_t>(cx);
    const Point2 c = cell_centre(ib, b.w);
    if (std::abs(p.x - c.x) > 4.0 || std::abs(p.y - c.y) > 4.0) continue;
    const double d = std::hypot(p.x - c.x, p.y - c.y);
    if (d < owner_dist[ib]) {
      owner_dist[ib] = d;
      owner[ib] = ia;
    }
    target[ia] = ib;
  }
  for (std::size_t ia = 0; ia < a.cells(); ++ia) {
    const std::size_t ib = target[ia];
    if (ib == none || owner[ib] != ia) continue;
    gt.coarse_pairs.emplace_back(ia, ib);
    gt.fine_targets.push_back(warped[ia]);
  }
  return gt;
}

/// Counts of loss terms that had nothing to average over.
struct LossWarnings {
  std::size_t empty_coarse = 0;
  std::size_t empty_fine1 = 0;
  std::size_t empty_fine2 = 0;
};

/// -mean(log(max(values, 1e-12))) over the picked flat indices; an empty
/// pick list gives 0 and bumps the counter.
template <typename T>
BasicTensor<T> picked_nll(const BasicTensor<T>& probs, const std::vector<std::size_t>& flat, std::size_t& empty_counter) {
  if (flat.empty()) {
    ++empty_counter;
    return BasicTensor<T>::scalar(T(0));
  }
  return scale(mean(log(gather(probs, flat))), T(-1));
}

/// Negative log-likelihood of the ground-truth cell pairs under the
/// assignment matrix P[Na, Nb].
template <typename T>
BasicTensor<T> coarse_loss(const BasicTensor<T>& probs, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                           LossWarnings& warn) {
  detail::require(probs.rank() == 2, "coarse_loss: expected [Na, Nb]");
  const std::size_t nb = probs.dim(1);
  std::vector<std::size_t> flat;
  flat.reserve(pairs.size());
  for (auto [ia, ib] : pairs) {
    if (ia >= probs.dim(0) || ib >= nb) throw ContractError("coarse_loss: ground-truth pair outside the score matrix");
    flat.push_back(ia * nb + ib);
  }
  return picked_nll(probs, flat, warn.empty_coarse);
}

/// One supervised entry of a fine score matrix: match m, patch-A pixel ka,
/// patch-B pixel kb.
struct FineLabel {
  std::size_t match = 0;
  std::size_t ka = 0;
  std::size_t kb = 0;
};

/// Negative log-likelihood of the labelled pixel pairs under per-match
/// dual-softmax matrices probs[M, p*p, p*p].
template <typename T>
BasicTensor<T> fine_loss_stage1(const BasicTensor<T>& probs, const std::vector<FineLabel>& labels, LossWarnings& warn) {
  detail::require(probs.rank() == 3 && probs.dim(1) == probs.dim(2), "fine_loss_stage1: expected [M, K, K]");
  const std::size_t k = probs.dim(1);
  std::vector<std::size_t> flat;
  flat.reserve(labels.size());
  for (const auto& l : labels) {
    if (l.match >= probs.dim(0) || l.ka >= k || l.kb >= k) continue;
    flat.push_back((l.match * k + l.ka) * k + l.kb);
  }
  return picked_nll(probs, flat, warn.empty_fine1);
}

/// Mean squared Euclidean distance between predicted and target points [M, 2].
template <typename T>
BasicTensor<T> fine_loss_stage2(const BasicTensor<T>& pred, const BasicTensor<T>& target, LossWarnings& warn) {
  detail::require(pred.shape() == target.shape() && pred.rank() == 2 && pred.dim(1) == 2,
                  "fine_loss_stage2: expected matching [M, 2] tensors");
  if (pred.dim(0) == 0) {
    ++warn.empty_fine2;
    return BasicTensor<T>::scalar(T(0));
  }
  return scale(sum(square(sub(pred, target))), T(1) / static_cast<T>(pred.dim(0)));
}

struct LossWeights {
  double alpha = 1.0;  // fine stage 1
  double beta = 0.25;  // fine stage 2
};

template <typename T>
BasicTensor<T> total_loss(const BasicTensor<T>& coarse, const BasicTensor<T>& fine1, const BasicTensor<T>& fine2,
                          LossWeights w = {}) {
  if (w.alpha < 0 || w.beta < 0) throw ConfigError("total_loss: loss weights must be non-negative");
  return add(add(coarse, scale(fine1, static_cast<T>(w.alpha))), scale(fine2, static_cast<T>(w.beta)));
}

}  // namespace vmatcher
