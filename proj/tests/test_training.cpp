#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "test_util.hpp"
#include "vmatcher/training.hpp"

using namespace vmatcher;

namespace {

ModelConfig small_config(std::string pattern = "M G Ms G S M G C") {
  ModelConfig c;
  c.pattern = std::move(pattern);
  c.coarse_dim = 32;
  c.fine_dim = 16;
  c.mlp_dim = 64;
  c.state_dim = 4;
  return c;
}

Homography translation(double tx, double ty) {
  Homography h = Homography::Identity();
  h(0, 2) = tx;
  h(1, 2) = ty;
  return h;
}

}  // namespace

// ---------------------------------------------------------------- losses

TEST(CoarseLoss, CertainAssignmentIsZero) {
  Tensor p({3, 3});
  for (std::size_t i = 0; i < 3; ++i) p.mutable_data()[i * 3 + i] = 1.0f;
  LossWarnings w;
  EXPECT_EQ(coarse_loss(p, {{0, 0}, {1, 1}, {2, 2}}, w).item(), 0.0f);
}

TEST(CoarseLoss, UniformDualSoftmaxGivesTwoLogK) {
  for (std::size_t k : {2u, 5u, 16u}) {
    auto p = dual_softmax(Tensor::zeros({k, k}));
    LossWarnings w;
    const auto l = coarse_loss(p, {{0, 1}, {1, 0}}, w).item();
    EXPECT_NEAR(l, 2.0 * std::log(double(k)), 1e-5) << k;
  }
}

TEST(CoarseLoss, SeededMatchesDoubleOracle) {
  Rng rng(31);
  auto s = uniform_tensor<double>({4, 4}, -2, 2, rng);
  const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 2}, {1, 0}, {3, 3}};
  LossWarnings w;
  const double got = coarse_loss(dual_softmax(s), pairs, w).item();
  double expect = 0;
  for (auto [i, j] : pairs) {
    double row = 0, col = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      row += std::exp(s[i * 4 + k]);
      col += std::exp(s[k * 4 + j]);
    }
    const double pij = std::exp(s[i * 4 + j]) / row * std::exp(s[i * 4 + j]) / col;
    expect -= std::log(pij);
  }
  EXPECT_NEAR(got, expect / 3.0, 1e-12);
}

TEST(CoarseLoss, EmptyGroundTruthCountsWarning) {
  LossWarnings w;
  EXPECT_EQ(coarse_loss(Tensor::full({2, 2}, 0.25f), {}, w).item(), 0.0f);
  EXPECT_EQ(w.empty_coarse, 1u);
}

TEST(CoarseLoss, ClampsZeroProbability) {
  LossWarnings w;
  const float l = coarse_loss(Tensor::zeros({2, 2}), {{0, 0}}, w).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, -std::log(1e-12), 1e-3);
}

TEST(CoarseLoss, PairOutsideMatrixRejected) {
  LossWarnings w;
  EXPECT_THROW(coarse_loss(Tensor::zeros({2, 2}), {{2, 0}}, w), ContractError);
}

TEST(FineLossStage1, CertainIsZeroAndUniformIsFourLogP) {
  const std::size_t p = 4, k = p * p;
  Tensor certain({1, k, k});
  certain.mutable_data()[3 * k + 5] = 1.0f;
  LossWarnings w;
  EXPECT_EQ(fine_loss_stage1(certain, {{0, 3, 5}}, w).item(), 0.0f);

  auto s = Tensor::zeros({2, k, k});
  auto probs = mul(softmax(s, 2), softmax(s, 1));
  EXPECT_NEAR(fine_loss_stage1(probs, {{0, 1, 2}, {1, 7, 7}}, w).item(), 4.0 * std::log(double(p)), 1e-5);
}

TEST(FineLossStage1, SeededPatchPairMatchesOracle) {
  Rng rng(32);
  const std::size_t k = 9, c = 5;
  auto a = uniform_tensor<double>({1, k, c}, -1, 1, rng);
  auto b = uniform_tensor<double>({1, k, c}, -1, 1, rng);
  auto s = bmm_nt(a, b);
  auto probs = mul(softmax(s, 2), softmax(s, 1));
  const std::vector<FineLabel> labels{{0, 0, 4}, {0, 8, 1}, {0, 3, 3}};
  LossWarnings w;
  const double got = fine_loss_stage1(probs, labels, w).item();
  // Straight-line evaluation of the score matrix and both softmaxes.
  std::vector<double> sc(k * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double d = 0;
      for (std::size_t q = 0; q < c; ++q) d += a[i * c + q] * b[j * c + q];
      sc[i * k + j] = d;
    }
  double expect = 0;
  for (const auto& l : labels) {
    double row = 0, col = 0;
    for (std::size_t q = 0; q < k; ++q) {
      row += std::exp(sc[l.ka * k + q]);
      col += std::exp(sc[q * k + l.kb]);
    }
    const double e = std::exp(sc[l.ka * k + l.kb]);
    expect -= std::log(e / row * e / col);
  }
  EXPECT_NEAR(got, expect / 3.0, 1e-12);
}

TEST(FineLossStage1, LabelsOutsidePatchExcluded) {
  const std::size_t k = 4;
  auto probs = Tensor::full({1, k, k}, 0.5f);
  LossWarnings w;
  EXPECT_NEAR(fine_loss_stage1(probs, {{0, 1, 1}, {0, 9, 0}, {3, 0, 0}}, w).item(), -std::log(0.5), 1e-6);
  EXPECT_EQ(fine_loss_stage1(probs, {{0, 9, 0}}, w).item(), 0.0f);
  EXPECT_EQ(w.empty_fine1, 1u);
}

TEST(FineLossStage2, Examples) {
  LossWarnings w;
  Tensor pred({1, 2}, {1.0f, 2.0f});
  EXPECT_EQ(fine_loss_stage2(pred, pred, w).item(), 0.0f);
  EXPECT_FLOAT_EQ(fine_loss_stage2(pred, Tensor({1, 2}, {4.0f, 6.0f}), w).item(), 25.0f);
  EXPECT_EQ(fine_loss_stage2(Tensor({0, 2}), Tensor({0, 2}), w).item(), 0.0f);
  EXPECT_EQ(w.empty_fine2, 1u);
}

TEST(FineLossStage2, RandomPairsMatchIndependentMean) {
  Rng rng(33);
  auto a = uniform_tensor<double>({17, 2}, -3, 3, rng);
  auto b = uniform_tensor<double>({17, 2}, -3, 3, rng);
  double expect = 0;
  for (std::size_t i = 0; i < 17; ++i) expect += std::pow(a[2 * i] - b[2 * i], 2) + std::pow(a[2 * i + 1] - b[2 * i + 1], 2);
  LossWarnings w;
  EXPECT_NEAR(fine_loss_stage2(a, b, w).item(), expect / 17.0, 1e-12);
}

TEST(TotalLoss, Examples) {
  auto s = [](float v) { return Tensor::scalar(v); };
  EXPECT_FLOAT_EQ(total_loss(s(1), s(2), s(4)).item(), 4.0f);
  EXPECT_FLOAT_EQ(total_loss(s(1), s(2), s(4), {1.0, 0.0}).item(), 3.0f);
  EXPECT_EQ(total_loss(s(0), s(0), s(0)).item(), 0.0f);
  EXPECT_THROW(total_loss(s(0), s(0), s(0), {-1.0, 0.0}), ConfigError);
}

// ------------------------------------------------------------- synthetic

TEST(SynthPair, IdentityConfigCopiesImage) {
  const auto p = synth_pair(4, 32, SynthConfig::identity());
  EXPECT_TRUE(p.h.isApprox(Homography::Identity(), 1e-15));
  ASSERT_EQ(p.image_a.shape(), p.image_b.shape());
  for (std::size_t i = 0; i < p.image_a.size(); ++i) ASSERT_EQ(p.image_a[i], p.image_b[i]);
}

TEST(SynthPair, DeterministicPerSeed) {
  const auto a = synth_pair(11, 64), b = synth_pair(11, 64), c = synth_pair(12, 64);
  EXPECT_TRUE(std::equal(a.image_a.data().begin(), a.image_a.data().end(), b.image_a.data().begin()));
  EXPECT_TRUE(std::equal(a.image_b.data().begin(), a.image_b.data().end(), b.image_b.data().begin()));
  EXPECT_EQ(a.h, b.h);
  EXPECT_NE(a.h, c.h);
}

TEST(SynthPair, InverseRoundTripsCorners) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = synth_pair(seed, 64);
    const Homography inv = p.h.inverse();
    for (Point2 c : {Point2{0, 0}, Point2{63, 0}, Point2{0, 63}, Point2{63, 63}}) {
      const Point2 r = apply(p.h, apply(inv, c));
      EXPECT_NEAR(r.x, c.x, 1e-6);
      EXPECT_NEAR(r.y, c.y, 1e-6);
    }
  }
}

TEST(SynthPair, WarpStaysWithinJitterBounds) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto p = synth_pair(seed, 128);
    EXPECT_GE(std::abs(p.h.topLeftCorner<2, 2>().determinant()), 0.1);
    // The centre moves by the translation term only, up to the projective jitter.
    const Point2 c = apply(p.h, {63.5, 63.5});
    EXPECT_LE(std::abs(c.x - 63.5), 12.8 + 0.5);
    EXPECT_LE(std::abs(c.y - 63.5), 12.8 + 0.5);
    for (float v : p.image_b.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(SynthPair, ImageBIsWarpOfImageA) {
  SynthConfig cfg;
  cfg.noise_sigma = 0.0;
  const auto p = synth_pair(5, 64, cfg);
  const Homography inv = p.h.inverse();
  for (std::size_t y = 8; y < 56; y += 7)
    for (std::size_t x = 8; x < 56; x += 5) {
      const Point2 s = apply(inv, {double(x), double(y)});
      EXPECT_NEAR(p.image_b[y * 64 + x], sample_bilinear(p.image_a, s.x, s.y), 1e-6);
    }
}

TEST(Augment, IdentityCodeKeepsThePair) {
  const auto p = synth_pair(6, 32);
  const auto q = augmented_pair(p, 0, false);
  EXPECT_EQ(std::vector<float>(q.image_a.data().begin(), q.image_a.data().end()),
            std::vector<float>(p.image_a.data().begin(), p.image_a.data().end()));
  EXPECT_EQ(std::vector<float>(q.image_b.data().begin(), q.image_b.data().end()),
            std::vector<float>(p.image_b.data().begin(), p.image_b.data().end()));
  EXPECT_LT((q.h - p.h).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Augment, SymmetriesAreDistinctPermutations) {
  std::set<std::vector<double>> seen;
  for (unsigned code = 0; code < 8; ++code) {
    const Homography d = dihedral_matrix(code, 16);
    const Point2 a = apply(d, {0, 0}), b = apply(d, {3, 1});
    seen.insert({a.x, a.y, b.x, b.y});
    for (const Point2 c : {a, b}) {
      EXPECT_GE(c.x, 0);
      EXPECT_LE(c.x, 15);
      EXPECT_GE(c.y, 0);
      EXPECT_LE(c.y, 15);
    }
  }
  EXPECT_EQ(seen.size(), 8u);
}

TEST(Augment, WarpRelationSurvivesEverySymmetryAndSwap) {
  SynthConfig cfg;
  cfg.noise_sigma = 0.0;
  const auto p = synth_pair(7, 64, cfg);
  for (unsigned code = 0; code < 16; ++code) {
    const bool swap = code & 8u;
    const auto q = augmented_pair(p, code & 7u, swap);
    // Unswapped: B' = A' o H'^-1. Swapped: A' = B' o H' (B' is the clean texture).
    const Tensor& warped = swap ? q.image_a : q.image_b;
    const Tensor& source = swap ? q.image_b : q.image_a;
    const Homography to_source = swap ? q.h : Homography(q.h.inverse());
    for (std::size_t y = 8; y < 56; y += 7)
      for (std::size_t x = 8; x < 56; x += 5) {
        const Point2 s = apply(to_source, {double(x), double(y)});
        EXPECT_NEAR(warped[y * 64 + x], sample_bilinear(source, s.x, s.y), 1e-5) << "code " << code;
      }
  }
}

TEST(Augment, NonSquareRejected) {
  SynthPair p;
  p.image_a = Tensor({1, 8, 16});
  p.image_b = Tensor({1, 8, 16});
  p.h = Homography::Identity();
  EXPECT_THROW(augmented_pair(p, 1, false), ContractError);
}

TEST(SynthPair, SizeMustBeMultipleOfEight) {
  EXPECT_THROW(synth_pair(0, 60), ContractError);
  EXPECT_THROW(synth_pair(0, 0), ContractError);
}

// ----------------------------------------------------------- ground truth

TEST(GroundTruth, IdentityPairsEveryCell) {
  const GridSize g{6, 5};
  const auto gt = gt_from_homography(Homography::Identity(), g, g);
  ASSERT_EQ(gt.coarse_pairs.size(), g.cells());
  for (std::size_t i = 0; i < g.cells(); ++i) {
    EXPECT_EQ(gt.coarse_pairs[i], std::make_pair(i, i));
    const Point2 c = cell_centre(i, g.w);
    EXPECT_EQ(gt.fine_targets[i].x, c.x);
    EXPECT_EQ(gt.fine_targets[i].y, c.y);
  }
}

TEST(GroundTruth, OneCellTranslationShiftsPairing) {
  const GridSize g{4, 4};
  const auto gt = gt_from_homography(translation(8, 0), g, g);
  ASSERT_EQ(gt.coarse_pairs.size(), 12u);
  for (auto [ia, ib] : gt.coarse_pairs) {
    EXPECT_NE(ia % 4, 3u);
    EXPECT_EQ(ib, ia + 1);
  }
  const auto down = gt_from_homography(translation(0, -8), g, g);
  for (auto [ia, ib] : down.coarse_pairs) EXPECT_EQ(ib + 4, ia);
  EXPECT_EQ(down.coarse_pairs.size(), 12u);
}

TEST(GroundTruth, RandomWarpsMatchBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const GridSize g{8, 8};
    const Homography h = random_homography(rng, 64, 64);
    const auto gt = gt_from_homography(h, g, g);
    // Brute force: nearest B centre over all cells, then keep the closest
    // A cell per B cell.
    std::map<std::size_t, std::pair<double, std::size_t>> best;
    for (std::size_t ia = 0; ia < g.cells(); ++ia) {
      const Point2 p = apply(h, cell_centre(ia, g.w));
      if (p.x < 0 || p.y < 0 || p.x > 63 || p.y > 63) continue;
      double dmin = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t ib = 0; ib < g.cells(); ++ib) {
        const Point2 c = cell_centre(ib, g.w);
        const double d = std::hypot(p.x - c.x, p.y - c.y);
        if (d < dmin) {
          dmin = d;
          arg = ib;
        }
      }
      const Point2 c = cell_centre(arg, g.w);
      if (std::abs(p.x - c.x) > 4 || std::abs(p.y - c.y) > 4) continue;
      auto it = best.find(arg);
      if (it == best.end() || dmin < it->second.first) best[arg] = {dmin, ia};
    }
    std::vector<std::pair<std::size_t, std::size_t>> expect;
    for (const auto& [ib, v] : best) expect.emplace_back(v.second, ib);
    std::sort(expect.begin(), expect.end());
    EXPECT_EQ(gt.coarse_pairs, expect) << "seed " << seed;
    for (std::size_t k = 0; k < gt.coarse_pairs.size(); ++k) {
      const Point2 p = apply(h, cell_centre(gt.coarse_pairs[k].first, g.w));
      EXPECT_EQ(gt.fine_targets[k].x, p.x);
      EXPECT_EQ(gt.fine_targets[k].y, p.y);
    }
  }
}

TEST(GroundTruth, UniquePerSideAndInsideB) {
  for (std::uint64_t seed = 100; seed < 130; ++seed) {
    Rng rng(seed);
    const GridSize g{16, 16};
    const auto gt = gt_from_homography(random_homography(rng, 128, 128), g, g);
    std::set<std::size_t> sa, sb;
    for (auto [ia, ib] : gt.coarse_pairs) {
      EXPECT_TRUE(sa.insert(ia).second);
      EXPECT_TRUE(sb.insert(ib).second);
    }
    for (const auto& t : gt.fine_targets) {
      EXPECT_GE(t.x, 0.0);
      EXPECT_GE(t.y, 0.0);
      EXPECT_LE(t.x, 127.0);
      EXPECT_LE(t.y, 127.0);
    }
  }
}

// ------------------------------------------------------------- optimizer

TEST(AdamW, ZeroGradientContractsByDecay) {
  Tensor p({3}, {1.0f, -2.0f, 0.5f}, true);
  AdamW<float> opt({0.01, 0.1});
  std::vector<Tensor*> params{&p};
  for (int s = 1; s <= 5; ++s) {
    opt.step(params);
    const double f = std::pow(1.0 - 0.01 * 0.1, s);
    EXPECT_NEAR(p[0], 1.0 * f, 1e-6);
    EXPECT_NEAR(p[1], -2.0 * f, 1e-6);
    EXPECT_NEAR(p[2], 0.5 * f, 1e-6);
  }
}

TEST(AdamW, FirstStepMovesByLearningRateAgainstGradient) {
  BasicTensor<double> p({2}, {1.0, 1.0}, true);
  p.mutable_grad()[0] = 3.0;
  p.mutable_grad()[1] = -0.25;
  AdamW<double> opt({0.1, 0.0});
  opt.step({&p});
  // Bias-corrected m/sqrt(v) is the sign of the gradient on the first step.
  EXPECT_NEAR(p[0], 0.9, 1e-7);
  EXPECT_NEAR(p[1], 1.1, 1e-6);
}

// ------------------------------------------------------------ train loop

namespace {

std::vector<TrainSample> tiny_dataset(std::size_t n, std::uint64_t seed = 3) { return make_dataset(n, 32, seed); }

std::vector<std::vector<float>> snapshot(Model& m) {
  std::vector<std::vector<float>> out;
  m.visit([&](const std::string&, Tensor& t, bool trainable) {
    if (trainable) out.emplace_back(t.data().begin(), t.data().end());
  });
  return out;
}

}  // namespace

TEST(TrainLoop, ZeroLearningRateKeepsWeightsWithoutDecay) {
  auto m = Model::build(small_config(), 1);
  const auto before = snapshot(m);
  TrainConfig tc;
  tc.optimizer.lr = 0.0;
  tc.grad_accum = 2;
  tc.epochs = 1;
  const auto r = train_loop(m, tiny_dataset(3), tc);
  EXPECT_EQ(r.trace.size(), 3u);
  EXPECT_EQ(r.updates, 2u);
  EXPECT_EQ(snapshot(m), before);
}

TEST(TrainLoop, SameSeedSameTrace) {
  TrainConfig tc;
  tc.optimizer.lr = 1e-3;
  tc.grad_accum = 2;
  tc.epochs = 2;
  tc.seed = 9;
  const auto data = tiny_dataset(3);
  auto m1 = Model::build(small_config(), 2), m2 = Model::build(small_config(), 2);
  const auto r1 = train_loop(m1, data, tc), r2 = train_loop(m2, data, tc);
  ASSERT_EQ(r1.trace.size(), 6u);
  std::ostringstream a, b;
  write_loss_csv(a, r1.trace);
  write_loss_csv(b, r2.trace);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(snapshot(m1), snapshot(m2));
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')), "step,L_c,L_f1,L_f2,L_total");
}

TEST(TrainLoop, AugmentedRunsAreSeededAndDiffer) {
  TrainConfig tc;
  tc.optimizer.lr = 1e-3;
  tc.grad_accum = 1;
  tc.epochs = 2;
  tc.seed = 3;
  const auto data = tiny_dataset(2);
  auto plain = Model::build(small_config(), 4);
  const auto r0 = train_loop(plain, data, tc);
  tc.augment = true;
  auto m1 = Model::build(small_config(), 4), m2 = Model::build(small_config(), 4);
  const auto r1 = train_loop(m1, data, tc), r2 = train_loop(m2, data, tc);
  std::ostringstream a, b, c;
  write_loss_csv(a, r0.trace);
  write_loss_csv(b, r1.trace);
  write_loss_csv(c, r2.trace);
  EXPECT_EQ(b.str(), c.str());
  EXPECT_NE(a.str(), b.str());
}

TEST(TrainLoop, EmptyDatasetRejected) {
  auto m = Model::build(small_config(), 1);
  EXPECT_THROW(train_loop(m, {}, TrainConfig{}), ContractError);
}

TEST(TrainLoop, NonFiniteLossNamesPairSeed) {
  auto m = Model::build(small_config(), 1);
  auto data = tiny_dataset(1);
  data[0].seed = 424242;
  data[0].pair.image_a.mutable_data()[100] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_loop(m, data, TrainConfig{});
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("424242"), std::string::npos) << e.what();
  }
}

TEST(TrainLoop, SinglePairOverfitDecreasesTrailingAverages) {
  auto m = Model::build(small_config(), 5);
  const auto data = make_dataset(1, 64, 21);
  TrainConfig tc;
  tc.optimizer.lr = 1e-3;
  tc.grad_accum = 1;
  tc.epochs = 200;
  const auto r = train_loop(m, data, tc);
  ASSERT_EQ(r.trace.size(), 200u);
  std::vector<double> windows;
  for (std::size_t w = 0; w < 4; ++w) {
    double s = 0;
    for (std::size_t i = 50 * w; i < 50 * (w + 1); ++i) s += r.trace[i].total;
    windows.push_back(s / 50);
  }
  for (std::size_t w = 1; w < 4; ++w) EXPECT_LT(windows[w], windows[w - 1]) << "window " << w;
}

TEST(TrainLoop, LossesAreNonNegative) {
  auto m = Model::build(small_config(), 6);
  m.set_training(true);
  LossWarnings warn;
  for (const auto& s : make_dataset(6, 64, 77)) {
    GradScope<float> scope;
    auto t = pair_losses(m, s.pair.image_a, s.pair.image_b, s.pair.h, {}, warn);
    EXPECT_GE(t.coarse.item(), 0.0f);
    EXPECT_GE(t.fine1.item(), 0.0f);
    EXPECT_GE(t.fine2.item(), 0.0f);
    EXPECT_GE(t.total.item(), 0.0f);
  }
}

TEST(TrainLoop, EveryTrainableTensorReceivesGradient) {
  auto m = Model::build(small_config("M Ms G S C"), 7);
  m.set_training(true);
  const auto s = make_dataset(1, 64, 8)[0];
  LossWarnings warn;
  {
    GradScope<float> scope;
    backward(pair_losses(m, s.pair.image_a, s.pair.image_b, s.pair.h, {}, warn).total);
  }
  std::size_t checked = 0;
  m.visit([&](const std::string& name, Tensor& t, bool trainable) {
    if (!trainable) return;
    ++checked;
    double norm = 0;
    if (t.has_grad())
      for (float g : t.grad()) norm += double(g) * g;
    EXPECT_GT(norm, 0.0) << name;
  });
  EXPECT_GT(checked, 50u);
}

TEST(FineSupervision, IdentityLabelsPairPixelsWithThemselves) {
  const GridSize g{4, 4}, f{16, 16};
  const auto gt = gt_from_homography(Homography::Identity(), g, g);
  const auto sup = fine_supervision(gt, g, g, f, f, 8);
  ASSERT_EQ(sup.patch_a.size(), 16u * 64u);
  std::size_t valid = 0;
  for (auto i : sup.patch_a) valid += i >= 0;
  EXPECT_EQ(sup.labels.size(), valid);
  for (const auto& l : sup.labels) EXPECT_EQ(l.ka, l.kb);
  ASSERT_EQ(sup.centre_a.size(), 16u);
  for (double o : sup.offsets) EXPECT_EQ(o, 0.0);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(sup.neighbours_b[9 * k + 4], sup.centre_a[k]);
}

TEST(FineSupervision, TranslationOffsetsAndLabels) {
  // A shift of 3 full pixels is 1.5 fine pixels: labels move by 2 (round
  // half up) and the stage-2 residual is -0.5.
  const GridSize g{4, 4}, f{16, 16};
  const auto gt = gt_from_homography(translation(3, 0), g, g);
  const auto sup = fine_supervision(gt, g, g, f, f, 8);
  ASSERT_FALSE(sup.labels.empty());
  for (const auto& l : sup.labels) {
    const auto k = l.match;
    EXPECT_EQ(sup.patch_b[64 * k + l.kb], sup.patch_a[64 * k + l.ka] + 2);
  }
  for (std::size_t k = 0; k < sup.centre_a.size(); ++k) {
    EXPECT_DOUBLE_EQ(sup.offsets[2 * k], -0.5);
    EXPECT_DOUBLE_EQ(sup.offsets[2 * k + 1], 0.0);
    EXPECT_EQ(sup.neighbours_b[9 * k + 4], sup.centre_a[k] + 2);
  }
}
