#pragma once

// Homography-estimation benchmark on synthetic pairs: DLT on predicted
// matches, corner-error AUC and match precision against the true warp.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "vmatcher/homography.hpp"
#include "vmatcher/matcher.hpp"
#include "vmatcher/synthetic.hpp"

namespace vmatcher {

struct PairScore {
  double corner_error = std::numeric_limits<double>::infinity();
  std::size_t matches = 0;
  std::size_t correct = 0;  // within the precision radius of the true warp
};

/// Scores one pair: corner error of the DLT estimate (infinite with fewer
/// than four matches or a degenerate fit) and correct-match count.
inline PairScore score_pair(const std::vector<FineMatch>& matches, const Homography& truth, std::size_t width,
                            std::size_t height, double radius = 2.0) {
  PairScore s;
  s.matches = matches.size();
  std::vector<Correspondence> corr;
  corr.reserve(matches.size());
  for (const auto& m : matches) {
    corr.push_back({{m.xa, m.ya}, {m.xb, m.yb}});
    const Point2 w = apply(truth, {m.xa, m.ya});
    if (std::hypot(w.x - m.xb, w.y - m.yb) <= radius) ++s.correct;
  }
  if (corr.size() >= 4) {
    try {
      s.corner_error = corner_error(estimate_homography(corr), truth, width, height);
    } catch (const DomainError&) {
      s.corner_error = std::numeric_limits<double>::infinity();
    }
  }
  return s;
}

struct EvalReport {
  std::size_t pairs = 0;
  std::size_t matches = 0;
  std::size_t correct = 0;
  double auc3 = 0, auc5 = 0, auc10 = 0;
  double precision = 0;  // correct / matches over all pairs
  std::vector<double> corner_errors;
};

inline EvalReport summarize(const std::vector<PairScore>& scores) {
  EvalReport r;
  r.pairs = scores.size();
  for (const auto& s : scores) {
    r.matches += s.matches;
    r.correct += s.correct;
    r.corner_errors.push_back(s.corner_error);
  }
  r.auc3 = error_auc(r.corner_errors, 3.0);
  r.auc5 = error_auc(r.corner_errors, 5.0);
  r.auc10 = error_auc(r.corner_errors, 10.0);
  r.precision = r.matches ? static_cast<double>(r.correct) / static_cast<double>(r.matches) : 0.0;
  return r;
}

/// Seed of held-out evaluation pair i.
inline std::uint64_t eval_pair_seed(std::uint64_t seed, std::size_t i) { return mix_seed(seed ^ 0xe7a1e7a1ULL, i); }

/// Generates `pairs` synthetic pairs and scores the matches produced by
/// `matcher` on each.
inline EvalReport evaluate_homography(const std::function<std::vector<FineMatch>(const SynthPair&)>& matcher,
                                      std::size_t pairs, std::uint64_t seed, std::size_t size = 128,
                                      const SynthConfig& cfg = {}) {
  std::vector<PairScore> scores;
  scores.reserve(pairs);
  for (std::size_t i = 0; i < pairs; ++i) {
    const SynthPair p = synth_pair(eval_pair_seed(seed, i), size, cfg);
    scores.push_back(score_pair(matcher(p), p.h, size, size));
  }
  return summarize(scores);
}

}  // namespace vmatcher
