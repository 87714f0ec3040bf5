#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "vmatcher/random.hpp"
#include "vmatcher/tensor.hpp"

namespace vmatcher {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// `loss_fn` builds the scalar loss from the current values of `inputs`.
/// Up to `samples` entries per tensor are perturbed by ±step. The error of an
/// entry is |analytic - numeric| / max(|analytic|, |numeric|, floor), where
/// floor is 1% of the largest gradient magnitude sampled in that tensor, so
/// entries that are numerically zero do not dominate the ratio.
template <typename T, typename LossFn>
GradCheckResult check_gradients(LossFn&& loss_fn, NamedTensors<T> inputs, Rng& rng, std::size_t samples = 8,
                                double step = 1e-3) {
  for (auto& [name, t] : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  {
    GradScope<T> scope;
    backward(loss_fn());
  }
  GradCheckResult result;
  for (auto& [name, t] : inputs) {
    std::vector<double> analytic, numeric;
    std::vector<double> grad(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), grad.begin());
    const std::size_t n = std::min<std::size_t>(samples, t.size());
    std::vector<std::size_t> picks;
    if (n == t.size()) {
      for (std::size_t i = 0; i < n; ++i) picks.push_back(i);
    } else {
      while (picks.size() < n) {
        const std::size_t i = rng.below(t.size());
        if (std::find(picks.begin(), picks.end(), i) == picks.end()) picks.push_back(i);
      }
    }
    NoGradScope<T> no_grad;
    auto values = t.mutable_data();
    for (std::size_t i : picks) {
      const T saved = values[i];
      values[i] = static_cast<T>(saved + step);
      const double up = static_cast<double>(loss_fn().item());
      values[i] = static_cast<T>(saved - step);
      const double down = static_cast<double>(loss_fn().item());
      values[i] = saved;
      analytic.push_back(grad[i]);
      numeric.push_back((up - down) / (2.0 * step));
    }
    double scale = 0.0;
    for (std::size_t k = 0; k < picks.size(); ++k)
      scale = std::max({scale, std::abs(analytic[k]), std::abs(numeric[k])});
    const double floor = std::max(1e-2 * scale, 1e-8);
    for (std::size_t k = 0; k < picks.size(); ++k) {
      const double denom = std::max({std::abs(analytic[k]), std::abs(numeric[k]), floor});
      const double err = std::abs(analytic[k] - numeric[k]) / denom;
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_tensor = name;
      }
    }
    result.checked += picks.size();
    t.zero_grad();
  }
  return result;
}

}  // namespace vmatcher
