#pragma once

// Per-pair supervised losses, AdamW with decoupled weight decay and the
// deterministic training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "vmatcher/model.hpp"
#include "vmatcher/supervision.hpp"
#include "vmatcher/synthetic.hpp"

namespace vmatcher {

template <typename T>
struct LossTerms {
  BasicTensor<T> coarse;
  BasicTensor<T> fine1;
  BasicTensor<T> fine2;
  BasicTensor<T> total;
};

namespace detail {

inline std::ptrdiff_t round_index(double v) { return static_cast<std::ptrdiff_t>(std::floor(v + 0.5)); }

}  // namespace detail

/// Index sets and targets for both refinement losses of one pair.
struct FineSupervision {
  std::vector<std::ptrdiff_t> patch_a, patch_b;  // p*p fine indices per ground-truth pair, -1 = padding
  std::vector<FineLabel> labels;                 // stage 1
  std::vector<std::ptrdiff_t> centre_a;          // stage 2: A pixel per supervised pair
  std::vector<std::ptrdiff_t> neighbours_b;      // 9 per supervised pair
  std::vector<double> offsets;                   // (dx, dy) per supervised pair, fine pixels
};

/// Stage 1 labels every patch-A pixel whose warp rounds onto a pixel of
/// patch B. Stage 2 takes the fine pixel at each A cell centre, the 3x3
/// neighbourhood around its rounded warp in B and the residual offset.
/// fine_a / fine_b are the (height, width) of the 1/2 resolution maps.
inline FineSupervision fine_supervision(const GroundTruth& gt, GridSize ga, GridSize gb, GridSize fine_a,
                                        GridSize fine_b, std::size_t p) {
  FineSupervision out;
  const std::size_t pp = p * p;
  const auto margin = (static_cast<std::ptrdiff_t>(p) - 4) / 2;
  const Homography& h = gt.h;
  for (std::size_t k = 0; k < gt.coarse_pairs.size(); ++k) {
    const auto [ia, ib] = gt.coarse_pairs[k];
    const auto pa = fine_patch_indices(ia, ga.w, fine_a.h, fine_a.w, p);
    const auto pb = fine_patch_indices(ib, gb.w, fine_b.h, fine_b.w, p);
    out.patch_a.insert(out.patch_a.end(), pa.begin(), pa.end());
    out.patch_b.insert(out.patch_b.end(), pb.begin(), pb.end());
    const std::ptrdiff_t bx0 = 4 * static_cast<std::ptrdiff_t>(ib % gb.w) - margin;
    const std::ptrdiff_t by0 = 4 * static_cast<std::ptrdiff_t>(ib / gb.w) - margin;
    for (std::size_t ka = 0; ka < pp; ++ka) {
      if (pa[ka] < 0) continue;
      const auto u = static_cast<std::size_t>(pa[ka]);
      const Point2 w =
          apply(h, {fine_to_full(static_cast<double>(u % fine_a.w)), fine_to_full(static_cast<double>(u / fine_a.w))});
      if (!std::isfinite(w.x) || !std::isfinite(w.y)) continue;
      const std::ptrdiff_t lx = detail::round_index(full_to_fine(w.x)) - bx0;
      const std::ptrdiff_t ly = detail::round_index(full_to_fine(w.y)) - by0;
      if (lx < 0 || ly < 0 || lx >= static_cast<std::ptrdiff_t>(p) || ly >= static_cast<std::ptrdiff_t>(p)) continue;
      const auto kb = static_cast<std::size_t>(ly) * p + static_cast<std::size_t>(lx);
      if (pb[kb] < 0) continue;
      out.labels.push_back({k, ka, kb});
    }

    const std::size_t ax = 4 * (ia % ga.w) + 2, ay = 4 * (ia / ga.w) + 2;
    const Point2 w = apply(h, {fine_to_full(static_cast<double>(ax)), fine_to_full(static_cast<double>(ay))});
    if (!std::isfinite(w.x) || !std::isfinite(w.y)) continue;
    const double gx = full_to_fine(w.x), gy = full_to_fine(w.y);
    const std::ptrdiff_t rx = detail::round_index(gx), ry = detail::round_index(gy);
    if (rx < 0 || ry < 0 || rx >= static_cast<std::ptrdiff_t>(fine_b.w) || ry >= static_cast<std::ptrdiff_t>(fine_b.h))
      continue;
    out.centre_a.push_back(static_cast<std::ptrdiff_t>(ay * fine_a.w + ax));
    const auto nb = neighbourhood_indices(rx, ry, fine_b.h, fine_b.w);
    out.neighbours_b.insert(out.neighbours_b.end(), nb.begin(), nb.end());
    out.offsets.push_back(gx - static_cast<double>(rx));
    out.offsets.push_back(gy - static_cast<double>(ry));
  }
  return out;
}

/// Forward pass of one pair with supervision from the homography h (A -> B).
/// The model must be in training mode for batch-statistics normalization.
template <typename T>
LossTerms<T> pair_losses(VMatcher<T>& model, const BasicTensor<T>& image_a, const BasicTensor<T>& image_b,
                         const Homography& h, LossWeights weights, LossWarnings& warn) {
  const ModelConfig& cfg = model.config();
  auto maps_a = model.extract(image_a);
  auto maps_b = model.extract(image_b);
  auto ta = VMatcher<T>::to_tokens(maps_a.f8);
  auto tb = VMatcher<T>::to_tokens(maps_b.f8);
  model.run_hybrid(ta, tb);

  LossTerms<T> out;
  const GroundTruth gt = gt_from_homography(h, ta.grid, tb.grid);
  out.coarse = coarse_loss(dual_softmax(model.score_matrix(ta, tb)), gt.coarse_pairs, warn);

  auto fa = model.fine_tokens(ta, maps_a);
  auto fb = model.fine_tokens(tb, maps_b);
  const std::size_t cf = fa.dim(1), p = cfg.patch, pp = p * p;
  const auto sup = fine_supervision(gt, ta.grid, tb.grid, {maps_a.f2.dim(1), maps_a.f2.dim(2)},
                                    {maps_b.f2.dim(1), maps_b.f2.dim(2)}, p);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cf)));

  const std::size_t m = gt.coarse_pairs.size();
  if (m > 0) {
    auto patch_a = reshape(gather_rows(fa, sup.patch_a), {m, pp, cf});
    auto patch_b = reshape(gather_rows(fb, sup.patch_b), {m, pp, cf});
    auto s = scale(bmm_nt(patch_a, patch_b), static_cast<T>(inv_sqrt / cfg.temperature));
    out.fine1 = fine_loss_stage1(mul(softmax(s, 2), softmax(s, 1)), sup.labels, warn);
  } else {
    out.fine1 = fine_loss_stage1(BasicTensor<T>({0, pp, pp}), sup.labels, warn);
  }

  const std::size_t m2 = sup.centre_a.size();
  BasicTensor<T> target({m2, 2}, std::vector<T>(sup.offsets.begin(), sup.offsets.end()));
  if (m2 > 0) {
    auto feat = reshape(gather_rows(fa, sup.centre_a), {m2, 1, cf});
    auto neigh = reshape(gather_rows(fb, sup.neighbours_b), {m2, 9, cf});
    auto w = reshape(softmax(scale(bmm_nt(feat, neigh), inv_sqrt), 2), {m2, 9});
    out.fine2 = fine_loss_stage2(matmul(w, neighbourhood_offsets<T>()), target, warn);
  } else {
    out.fine2 = fine_loss_stage2(BasicTensor<T>({0, 2}), target, warn);
  }

  out.total = total_loss(out.coarse, out.fine1, out.fine2, weights);
  return out;
}

struct AdamWOptions {
  double lr = 1e-4;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay: p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps).
/// A parameter without a gradient is treated as having zero gradient.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions opt = {}) : opt_(opt) {}

  void step(const std::vector<BasicTensor<T>*>& params, double lr_scale = 1.0) {
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ContractError("AdamW: parameter list changed between steps");
    ++t_;
    const double lr = opt_.lr * lr_scale;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      auto data = p.mutable_data();
      const bool has = p.has_grad();
      const auto g = has ? p.grad() : std::span<const T>{};
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < data.size(); ++k) {
        const double gk = has ? static_cast<double>(g[k]) : 0.0;
        m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * gk;
        v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * gk * gk;
        double x = static_cast<double>(data[k]);
        x -= lr * opt_.weight_decay * x;
        x -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt_.eps);
        data[k] = static_cast<T>(x);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  AdamWOptions opt_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

template <typename T>
std::vector<BasicTensor<T>*> trainable_parameters(VMatcher<T>& model) {
  std::vector<BasicTensor<T>*> out;
  model.visit([&](const std::string&, BasicTensor<T>& t, bool trainable) {
    if (trainable) out.push_back(&t);
  });
  return out;
}

struct TrainSample {
  std::uint64_t seed = 0;
  SynthPair pair;
};

/// Pair i is generated from mix_seed(seed, i).
inline std::vector<TrainSample> make_dataset(std::size_t pairs, std::size_t size, std::uint64_t seed,
                                             const SynthConfig& cfg = {}) {
  std::vector<TrainSample> out;
  out.reserve(pairs);
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::uint64_t s = mix_seed(seed, i);
    out.push_back({s, synth_pair(s, size, cfg)});
  }
  return out;
}

struct TrainConfig {
  AdamWOptions optimizer;
  std::size_t grad_accum = 32;
  std::size_t epochs = 5;
  std::size_t warmup_updates = 0;  // linear learning-rate warmup
  bool cosine_decay = false;       // cosine decay to zero over the run
  bool augment = false;            // seeded random symmetry and A/B swap per step
  LossWeights weights;
  std::uint64_t seed = 0;  // shuffling order

  void validate() const {
    if (grad_accum == 0) throw ConfigError("grad_accum must be >= 1");
    if (!(optimizer.lr >= 0) || !(optimizer.weight_decay >= 0)) throw ConfigError("lr and weight_decay must be >= 0");
    if (weights.alpha < 0 || weights.beta < 0) throw ConfigError("loss weights must be >= 0");
  }
};

struct LossRecord {
  std::size_t step = 0;
  double coarse = 0, fine1 = 0, fine2 = 0, total = 0;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  LossWarnings warnings;
  std::size_t updates = 0;
};

inline void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& trace) {
  os << "step,L_c,L_f1,L_f2,L_total\n";
  char buf[160];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", r.step, r.coarse, r.fine1, r.fine2, r.total);
    os << buf;
  }
}

namespace detail {

/// Name of the first array (or its gradient) holding a NaN or infinity.
template <typename T>
std::string first_non_finite(VMatcher<T>& model) {
  std::string bad;
  auto finite = [](std::span<const T> v) {
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
  };
  model.visit([&](const std::string& name, BasicTensor<T>& t, bool) {
    if (!bad.empty()) return;
    if (!finite(t.data())) bad = name;
    else if (t.requires_grad() && t.has_grad() && !finite(t.grad())) bad = name + ".grad";
  });
  return bad;
}

}  // namespace detail

/// One epoch is one pass over the dataset in a seeded shuffled order; an
/// optimizer update follows every grad_accum samples (and the final partial
/// group). Each sample's loss is scaled by 1/grad_accum before backward.
template <typename T>
TrainResult train_loop(VMatcher<T>& model, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                       const std::function<void(const LossRecord&)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw ContractError("train_loop: dataset is empty");
  model.set_training(true);
  auto params = trainable_parameters(model);
  for (auto* p : params) p->zero_grad();
  AdamW<T> opt(cfg.optimizer);
  TrainResult result;
  const std::size_t total_steps = cfg.epochs * data.size();
  const std::size_t total_updates = (total_steps + cfg.grad_accum - 1) / cfg.grad_accum;
  std::size_t step = 0, pending = 0;
  auto update = [&]() {
    double scale_lr = 1.0;
    const double u = static_cast<double>(result.updates);
    if (cfg.warmup_updates > 0 && result.updates < cfg.warmup_updates)
      scale_lr = (u + 1.0) / static_cast<double>(cfg.warmup_updates);
    else if (cfg.cosine_decay && total_updates > cfg.warmup_updates) {
      const double span = static_cast<double>(total_updates - cfg.warmup_updates);
      scale_lr = 0.5 * (1.0 + std::cos(std::numbers::pi * (u - static_cast<double>(cfg.warmup_updates)) / span));
    }
    opt.step(params, scale_lr);
    for (auto* p : params) p->zero_grad();
    ++result.updates;
    pending = 0;
  };
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(cfg.seed, 0xe90c0000ULL + epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t idx : order) {
      const auto& sample = data[idx];
      LossRecord rec;
      {
        GradScope<T> scope;
        std::optional<SynthPair> view;
        if (cfg.augment) {
          Rng aug(mix_seed(cfg.seed ^ 0xa5a50000ULL, step));
          const auto code = static_cast<unsigned>(aug.below(16));
          view = augmented_pair(sample.pair, code & 7u, (code & 8u) != 0);
        }
        const SynthPair& pair = view ? *view : sample.pair;
        auto terms = pair_losses(model, pair.image_a.template cast<T>(), pair.image_b.template cast<T>(), pair.h,
                                 cfg.weights, result.warnings);
        rec = {step, static_cast<double>(terms.coarse.item()), static_cast<double>(terms.fine1.item()),
               static_cast<double>(terms.fine2.item()), static_cast<double>(terms.total.item())};
        if (!std::isfinite(rec.total)) {
          throw NumericalError("non-finite training loss at step " + std::to_string(step) + " (pair seed " +
                               std::to_string(sample.seed) + ", L_c=" + std::to_string(rec.coarse) +
                               ", L_f1=" + std::to_string(rec.fine1) + ", L_f2=" + std::to_string(rec.fine2) + ")");
        }
        backward(scale(terms.total, static_cast<T>(1.0 / static_cast<double>(cfg.grad_accum))));
      }
      if (auto bad = detail::first_non_finite(model); !bad.empty())
        throw NumericalError("non-finite value in '" + bad + "' after step " + std::to_string(step) +
                             " (pair seed " + std::to_string(sample.seed) + ")");
      result.trace.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
      if (++pending == cfg.grad_accum) update();
    }
  }
  if (pending > 0) update();
  model.set_training(false);
  return result;
}

}  // namespace vmatcher
