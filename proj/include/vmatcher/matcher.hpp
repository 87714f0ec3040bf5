#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "vmatcher/layers.hpp"

namespace vmatcher {

struct CoarseMatch {
  std::size_t ia = 0;
  std::size_t ib = 0;
  double confidence = 0.0;

  bool operator==(const CoarseMatch& o) const { return ia == o.ia && ib == o.ib; }
};

/// Full-image pixel coordinates (pixel centres at integer positions).
struct FineMatch {
  double xa = 0.0, ya = 0.0, xb = 0.0, yb = 0.0;
  double confidence = 0.0;
};

struct MatchSet {
  std::vector<CoarseMatch> coarse;
  std::vector<FineMatch> fine;
};

template <typename T>
struct CoarseScores {
  BasicTensor<T> scores;  // [Na, Nb]
  T temperature = T(0.1);
};

/// S[i,j] = <a_i, b_j> / temperature.
template <typename T>
CoarseScores<T> coarse_scores(const BasicTensor<T>& feat_a, const BasicTensor<T>& feat_b, T temperature = T(0.1)) {
  if (!(temperature > T(0))) throw ConfigError("coarse_scores: temperature must be positive");
  return {scale(matmul_nt(feat_a, feat_b), T(1) / temperature), temperature};
}

/// Row softmax times column softmax of a [Na, Nb] score matrix.
template <typename T>
BasicTensor<T> dual_softmax(const BasicTensor<T>& scores) {
  detail::require(scores.rank() == 2, "dual_softmax: expected a matrix, got " + to_string(scores.shape()));
  return mul(softmax(scores, 1), softmax(scores, 0));
}

/// Mutual nearest neighbours of a [Na, Nb] matrix: (i, j) is kept iff entry
/// (i, j) is the strict maximum of row i and of column j and is >= threshold.
/// A row or column whose maximum is tied yields nothing. Matches are ordered by ia.
template <typename T>
std::vector<CoarseMatch> mnn_select(const BasicTensor<T>& values, double threshold) {
  detail::require(values.rank() == 2, "mnn_select: expected a matrix");
  const std::size_t na = values.dim(0), nb = values.dim(1);
  const T* v = values.ptr();
  constexpr std::size_t none = static_cast<std::size_t>(-1);
  std::vector<std::size_t> row_best(na, none), col_best(nb, none);
  for (std::size_t i = 0; i < na; ++i) {
    std::size_t best = none;
    bool tie = false;
    for (std::size_t j = 0; j < nb; ++j) {
      const T x = v[i * nb + j];
      if (best == none || x > v[i * nb + best]) {
        best = j;
        tie = false;
      } else if (x == v[i * nb + best]) {
        tie = true;
      }
    }
    if (!tie) row_best[i] = best;
  }
  // Column maxima in a row-major sweep.
  std::vector<std::size_t> col_arg(nb, none);
  std::vector<T> col_max(nb);
  std::vector<char> col_tie(nb, 0);
  for (std::size_t i = 0; i < na; ++i) {
    const T* row = v + i * nb;
    for (std::size_t j = 0; j < nb; ++j) {
      if (col_arg[j] == none || row[j] > col_max[j]) {
        col_arg[j] = i;
        col_max[j] = row[j];
        col_tie[j] = 0;
      } else if (row[j] == col_max[j]) {
        col_tie[j] = 1;
      }
    }
  }
  for (std::size_t j = 0; j < nb; ++j)
    if (!col_tie[j]) col_best[j] = col_arg[j];
  std::vector<CoarseMatch> out;
  for (std::size_t i = 0; i < na; ++i) {
    const std::size_t j = row_best[i];
    if (j == none || col_best[j] != i) continue;
    const double score = static_cast<double>(v[i * nb + j]);
    if (score >= threshold) out.push_back({i, j, score});
  }
  return out;
}

/// Feature-pyramid fusion of the transformed 1/8 map with the 1/4 and 1/2
/// backbone maps into the fine map used for refinement.
template <typename T>
struct FineFuseLayer {
  Conv2d<T> proj4;  // 1x1, C2 -> C3
  Conv2d<T> conv4;  // 3x3, C3 -> Cf
  Conv2d<T> proj2;  // 1x1, C1 -> Cf
  Conv2d<T> conv2;  // 3x3, Cf -> Cf

  static FineFuseLayer init(std::size_t c1, std::size_t c2, std::size_t c3, std::size_t fine, Rng& rng) {
    FineFuseLayer l;
    l.proj4 = Conv2d<T>::init(c2, c3, 1, 1, true, rng);
    l.conv4 = Conv2d<T>::init(c3, fine, 3, 1, true, rng);
    l.proj2 = Conv2d<T>::init(c1, fine, 1, 1, true, rng);
    l.conv2 = Conv2d<T>::init(fine, fine, 3, 1, true, rng);
    // Kaiming gain assumes a following ReLU; these convs are linear.
    for (auto* c : {&l.proj4, &l.conv4, &l.proj2, &l.conv2})
      for (auto& w : c->weight.mutable_data()) w = static_cast<T>(w * std::sqrt(0.5));
    return l;
  }

  std::size_t fine_dim() const { return conv2.weight.dim(0); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    proj4.visit(prefix + "proj4.", f);
    conv4.visit(prefix + "conv4.", f);
    proj2.visit(prefix + "proj2.", f);
    conv2.visit(prefix + "conv2.", f);
  }
};

/// up2(coarse) + proj4(f4) -> conv4 -> up2 + proj2(f2) -> conv2.
template <typename T>
BasicTensor<T> fine_fuse(const FineFuseLayer<T>& layer, const BasicTensor<T>& coarse, const BasicTensor<T>& f4,
                         const BasicTensor<T>& f2) {
  detail::require(coarse.rank() == 3 && f4.rank() == 3 && f2.rank() == 3 && f4.dim(1) == 2 * coarse.dim(1) &&
                      f4.dim(2) == 2 * coarse.dim(2) && f2.dim(1) == 2 * f4.dim(1) && f2.dim(2) == 2 * f4.dim(2),
                  "fine_fuse: inconsistent resolutions " + to_string(coarse.shape()) + ", " + to_string(f4.shape()) +
                      ", " + to_string(f2.shape()));
  auto m4 = layer.conv4(add(bilinear_resize(coarse, f4.dim(1), f4.dim(2)), layer.proj4(f4)));
  return layer.conv2(add(bilinear_resize(m4, f2.dim(1), f2.dim(2)), layer.proj2(f2)));
}

/// Fine-map pixel indices (row-major, -1 outside the map) of the p x p patch
/// centred on a coarse cell. A coarse cell covers a 4x4 block at 1/2
/// resolution; the patch extends (p-4)/2 pixels beyond it on every side.
inline std::vector<std::ptrdiff_t> fine_patch_indices(std::size_t cell, std::size_t coarse_w, std::size_t fine_h,
                                                      std::size_t fine_w, std::size_t patch) {
  const auto cy = static_cast<std::ptrdiff_t>(cell / coarse_w);
  const auto cx = static_cast<std::ptrdiff_t>(cell % coarse_w);
  const auto margin = (static_cast<std::ptrdiff_t>(patch) - 4) / 2;
  std::vector<std::ptrdiff_t> idx;
  idx.reserve(patch * patch);
  for (std::ptrdiff_t dy = 0; dy < static_cast<std::ptrdiff_t>(patch); ++dy)
    for (std::ptrdiff_t dx = 0; dx < static_cast<std::ptrdiff_t>(patch); ++dx) {
      const std::ptrdiff_t y = 4 * cy - margin + dy;
      const std::ptrdiff_t x = 4 * cx - margin + dx;
      const bool inside = y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(fine_h) &&
                          x < static_cast<std::ptrdiff_t>(fine_w);
      idx.push_back(inside ? y * static_cast<std::ptrdiff_t>(fine_w) + x : -1);
    }
  return idx;
}

/// Fine-map indices of the 3x3 neighbourhood (row-major over offsets
/// {-1,0,1}^2) around pixel (x, y); -1 outside the map.
inline std::vector<std::ptrdiff_t> neighbourhood_indices(std::ptrdiff_t x, std::ptrdiff_t y, std::size_t fine_h,
                                                         std::size_t fine_w) {
  std::vector<std::ptrdiff_t> idx;
  idx.reserve(9);
  for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
    for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
      const std::ptrdiff_t yy = y + dy, xx = x + dx;
      const bool inside = yy >= 0 && xx >= 0 && yy < static_cast<std::ptrdiff_t>(fine_h) &&
                          xx < static_cast<std::ptrdiff_t>(fine_w);
      idx.push_back(inside ? yy * static_cast<std::ptrdiff_t>(fine_w) + xx : -1);
    }
  return idx;
}

struct PatchMatch {
  std::size_t ka = 0;  // row-major index inside patch A
  std::size_t kb = 0;  // row-major index inside patch B
  double score = 0.0;
};

/// First refinement stage: correlate the two patches, keep mutual nearest
/// neighbours and return the highest-scoring pair. No MNN pair -> nullopt.
template <typename T>
std::optional<PatchMatch> refine_stage1(const BasicTensor<T>& patch_a, const BasicTensor<T>& patch_b) {
  auto scores = matmul_nt(patch_a, patch_b);
  auto pairs = mnn_select(scores, -std::numeric_limits<double>::infinity());
  std::optional<PatchMatch> best;
  for (const auto& m : pairs) {
    if (!best || m.confidence > best->score) best = PatchMatch{m.ia, m.ib, m.confidence};
  }
  return best;
}

struct SubPixelOffset {
  double dx = 0.0;
  double dy = 0.0;
};

/// (dx, dy) of the 3x3 neighbourhood in row-major order.
template <typename T>
BasicTensor<T> neighbourhood_offsets() {
  std::vector<T> v;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      v.push_back(static_cast<T>(dx));
      v.push_back(static_cast<T>(dy));
    }
  return BasicTensor<T>({9, 2}, std::move(v));
}

/// Second refinement stage: softmax over <feat_a, neighbour_k> / sqrt(Cf) and
/// the expected offset under those weights. Always inside [-1, 1]^2.
template <typename T>
SubPixelOffset refine_stage2(const BasicTensor<T>& feat_a, const BasicTensor<T>& neighbours) {
  detail::require(neighbours.rank() == 2 && neighbours.dim(0) == 9 && feat_a.size() == neighbours.dim(1),
                  "refine_stage2: expected feat [Cf] and neighbours [9, Cf]");
  const std::size_t cf = feat_a.size();
  auto scores = scale(matmul_nt(reshape(feat_a, {1, cf}), neighbours), static_cast<T>(1.0 / std::sqrt(double(cf))));
  auto w = softmax(scores, 1);
  auto offs = neighbourhood_offsets<T>();
  SubPixelOffset o;
  double total = 0.0;
  for (std::size_t k = 0; k < 9; ++k) {
    total += static_cast<double>(w[k]);
    o.dx += static_cast<double>(w[k]) * offs[2 * k];
    o.dy += static_cast<double>(w[k]) * offs[2 * k + 1];
  }
  // Float weights can sum to slightly above one.
  o.dx = std::clamp(o.dx / total, -1.0, 1.0);
  o.dy = std::clamp(o.dy / total, -1.0, 1.0);
  return o;
}

}  // namespace vmatcher
