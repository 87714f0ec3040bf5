#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "vmatcher/archive.hpp"
#include "vmatcher/calibration.hpp"
#include "vmatcher/eval.hpp"
#include "vmatcher/pgm.hpp"
#include "vmatcher/synthetic.hpp"

using namespace vmatcher;
namespace fs = std::filesystem;

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

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("vmatcher_test_" + name); }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Independent per-layer count for the analytic oracle.
std::size_t expected_parameters(const ModelConfig& c) {
  const std::size_t C = c.coarse_dim, D = C / 2, N = c.state_dim, E = c.mlp_dim, F = c.fine_dim;
  const std::size_t c1 = C / 4, c2 = C / 2, c3 = C;
  std::size_t total = 0, in = 1;
  for (std::size_t out : {c1, c1, c1, c2, c2, c2, c3, c3, c3}) {
    total += in * out * 9 + 2 * out;
    in = out;
  }
  const std::size_t mamba = 2 * C + 2 * (C * D + D) + 2 * (3 * D + D) + 3 * D * N + D * D + D + C * C + C;
  const std::size_t mlp = 2 * C + 2 * (C * E + E) + E * C + C;
  const std::size_t attn = 3 * (C * C + C);
  for (auto k : parse_pattern(c.pattern))
    total += (k == LayerKind::Mamba || k == LayerKind::MambaS) ? mamba : k == LayerKind::Gmlp ? mlp : attn;
  total += (c2 * c3 + c3) + (c3 * F * 9 + F) + (c1 * F + F) + (F * F * 9 + F);
  return total;
}

}  // namespace

// ---------------------------------------------------------------- pattern

TEST(Pattern, PresetsParseVerbatim) {
  const auto t = parse_pattern(preset_pattern("T"));
  const auto b = parse_pattern(preset_pattern("B"));
  EXPECT_EQ(t.size(), 14u);
  EXPECT_EQ(b.size(), 24u);
  EXPECT_EQ(pattern_string(t), "M G Ms G S M G Ms G C M G Ms G");
  EXPECT_EQ(pattern_string(b), "M G Ms G S M G Ms G C M G Ms G S M G Ms G C M G Ms G");
  EXPECT_EQ(b.back(), LayerKind::Gmlp);
  EXPECT_THROW(preset_pattern("L"), ConfigError);
}

TEST(Pattern, UnknownTokenNamesPosition) {
  try {
    parse_pattern("M X");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("position 2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("'X'"), std::string::npos);
  }
  EXPECT_THROW(parse_pattern("M ms"), ParseError);
  EXPECT_EQ(parse_pattern("  M\tG \n C ").size(), 3u);
}

TEST(Pattern, AttentionMarkersFollowMambaInPresets) {
  for (const char* name : {"T", "B"}) {
    bool seen_mamba = false;
    for (auto k : parse_pattern(preset_pattern(name))) {
      if (k == LayerKind::Mamba || k == LayerKind::MambaS) seen_mamba = true;
      if (k == LayerKind::SelfAttn || k == LayerKind::CrossAttn) {
        EXPECT_TRUE(seen_mamba);
      }
    }
  }
}

// ------------------------------------------------------------------ build

TEST(Build, SameSeedBitIdentical) {
  auto a = Model::build(small_config(), 5), b = Model::build(small_config(), 5), c = Model::build(small_config(), 6);
  EXPECT_EQ(archive_bytes(a), archive_bytes(b));
  EXPECT_NE(archive_bytes(a), archive_bytes(c));
}

TEST(Build, InvalidConfigurationsRejected) {
  auto c = small_config();
  c.coarse_dim = 33;
  EXPECT_THROW(Model::build(c, 0), ConfigError);
  c = small_config();
  c.pattern = "M Q";
  EXPECT_THROW(Model::build(c, 0), ParseError);
  c = small_config();
  c.threshold = 1.0;
  EXPECT_THROW(Model::build(c, 0), ConfigError);
}

TEST(Build, ParameterCountMatchesAnalyticFormula) {
  for (const char* name : {"T", "B"}) {
    ModelConfig c;
    c.pattern = preset_pattern(name);
    auto m = Model::build(c, 1);
    EXPECT_EQ(m.parameter_count(), expected_parameters(c)) << name;
  }
  auto m = Model::build(small_config(), 1);
  EXPECT_EQ(m.parameter_count(), expected_parameters(small_config()));
}

TEST(Build, PresetTSmallerThanB) {
  ModelConfig t, b;
  b.pattern = preset_pattern("B");
  EXPECT_LT(Model::build(t, 0).parameter_count(), Model::build(b, 0).parameter_count());
}

TEST(Build, ConfigJsonRoundTrip) {
  ModelConfig c = small_config();
  c.direction = ScanDirection::Bi;
  c.use_rope = false;
  c.raw_threshold = 3.25;
  nlohmann::json j = c;
  const auto back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  j["direction"] = "sideways";
  EXPECT_THROW(j.get<ModelConfig>(), ConfigError);
}

// ------------------------------------------------------------------ match

TEST(MatchPair, SelfMatchIsIdentity) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto c = small_config();
    c.threshold = 0.0;
    auto m = Model::build(c, seed);
    m.set_training(false);
    const auto p = synth_pair(seed, 64);
    const auto r = match_pair(m, p.image_a, p.image_a);
    EXPECT_FALSE(r.matches.coarse.empty());
    for (const auto& cm : r.matches.coarse) EXPECT_EQ(cm.ia, cm.ib);
    for (const auto& f : r.matches.fine) {
      EXPECT_LE(std::abs(f.xa - f.xb), 8.0);
      EXPECT_LE(std::abs(f.ya - f.yb), 8.0);
    }
  }
}

TEST(MatchPair, OptimizedSelfMatchIsIdentity) {
  auto c = small_config();
  c.optimized = true;
  c.raw_threshold = -1e9;
  auto m = Model::build(c, 4);
  m.set_training(false);
  const auto p = synth_pair(4, 64);
  const auto r = match_pair(m, p.image_b, p.image_b);
  EXPECT_FALSE(r.matches.coarse.empty());
  for (const auto& cm : r.matches.coarse) EXPECT_EQ(cm.ia, cm.ib);
}

TEST(MatchPair, DeterministicAndTimed) {
  auto c = small_config();
  c.threshold = 0.0;
  auto m = Model::build(c, 8);
  m.set_training(false);
  const auto p = synth_pair(8, 64);
  const auto r1 = match_pair(m, p.image_a, p.image_b), r2 = match_pair(m, p.image_a, p.image_b);
  ASSERT_EQ(r1.matches.coarse.size(), r2.matches.coarse.size());
  ASSERT_EQ(r1.matches.fine.size(), r2.matches.fine.size());
  for (std::size_t i = 0; i < r1.matches.fine.size(); ++i) {
    EXPECT_EQ(r1.matches.fine[i].xb, r2.matches.fine[i].xb);
    EXPECT_EQ(r1.matches.fine[i].yb, r2.matches.fine[i].yb);
    EXPECT_EQ(r1.matches.fine[i].confidence, r2.matches.fine[i].confidence);
  }
  const auto& t = r1.timings;
  EXPECT_GT(t.total_ms, 0.0);
  EXPECT_LE(std::abs(t.stage_sum() - t.total_ms), 0.05 * t.total_ms);
}

TEST(MatchPair, MatchesStayInsideOriginalFrames) {
  auto c = small_config();
  c.threshold = 0.0;
  auto m = Model::build(c, 9);
  m.set_training(false);
  // 60x44 is padded to 64x48 internally.
  const auto p = synth_pair(9, 64);
  Tensor a({1, 44, 60}), b({1, 44, 60});
  for (std::size_t y = 0; y < 44; ++y)
    for (std::size_t x = 0; x < 60; ++x) {
      a.mutable_data()[y * 60 + x] = p.image_a[y * 64 + x];
      b.mutable_data()[y * 60 + x] = p.image_b[y * 64 + x];
    }
  const auto r = match_pair(m, a, b);
  EXPECT_FALSE(r.matches.fine.empty());
  for (const auto& f : r.matches.fine) {
    EXPECT_TRUE(f.xa >= 0 && f.xa <= 59 && f.ya >= 0 && f.ya <= 43);
    EXPECT_TRUE(f.xb >= 0 && f.xb <= 59 && f.yb >= 0 && f.yb <= 43);
  }
}

TEST(MatchPair, CoarseIndicesUniquePerSide) {
  auto c = small_config();
  c.threshold = 0.0;
  auto m = Model::build(c, 10);
  m.set_training(false);
  const auto p = synth_pair(10, 64);
  const auto r = match_pair(m, p.image_a, p.image_b);
  std::set<std::size_t> sa, sb;
  for (const auto& cm : r.matches.coarse) {
    EXPECT_TRUE(sa.insert(cm.ia).second);
    EXPECT_TRUE(sb.insert(cm.ib).second);
  }
}

TEST(MatchPair, TranslationShiftsInteriorMatches) {
  // Token-wise layers keep the pipeline translation-equivariant away from
  // the borders, so an 8-pixel shift moves interior matches by one cell.
  auto c = small_config("G G");
  c.threshold = 0.0;
  auto m = Model::build(c, 11);
  m.set_training(false);
  const std::size_t n = 96, g = n / 8;
  const auto p = synth_pair(11, n);
  Tensor shifted({1, n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 8; x < n; ++x) shifted.mutable_data()[y * n + x] = p.image_a[y * n + x - 8];
  const auto r = match_pair(m, p.image_a, shifted);
  std::size_t interior = 0, shifted_ok = 0;
  for (const auto& cm : r.matches.coarse) {
    const std::size_t x = cm.ia % g, y = cm.ia / g;
    if (x < 3 || x + 4 > g || y < 3 || y + 3 > g) continue;
    ++interior;
    shifted_ok += cm.ib == cm.ia + 1;
  }
  ASSERT_GT(interior, 10u);
  EXPECT_GE(double(shifted_ok), 0.9 * double(interior));
}

TEST(MatchPair, PadsToMultipleOfEight) {
  Tensor img({1, 9, 17});
  img.mutable_data()[0] = 1.0f;
  img.mutable_data()[9 * 17 - 1] = 2.0f;
  const auto p = pad_to_multiple_of_8(img);
  EXPECT_EQ(p.shape(), (Shape{1, 16, 24}));
  EXPECT_EQ(p[0], 1.0f);
  EXPECT_EQ(p[8 * 24 + 16], 2.0f);
  EXPECT_EQ(p[8 * 24 + 17], 0.0f);
}

TEST(Timings, CsvHasOneRowPerStage) {
  std::ostringstream os;
  write_timings_csv(os, {1, 2, 3, 4, 10});
  EXPECT_EQ(os.str(), "stage,milliseconds\nbackbone,1\nhybrid,2\ncoarse,3\nfine,4\ntotal,10\n");
}

// ---------------------------------------------------------------- archive

TEST(Archive, SaveLoadSaveIsByteIdentical) {
  auto m = Model::build(small_config(), 12);
  m.mutable_config().raw_threshold = 1.5;
  const auto path = temp_path("roundtrip.vmw");
  save_model(m, path);
  Model loaded = load_model(path);
  EXPECT_EQ(loaded.config().raw_threshold, 1.5);
  const auto path2 = temp_path("roundtrip2.vmw");
  save_model(loaded, path2);
  EXPECT_EQ(slurp(path), slurp(path2));
  fs::remove(path);
  fs::remove(path2);
}

TEST(Archive, RoundTripKeepsMatching) {
  auto c = small_config();
  c.threshold = 0.0;
  auto m = Model::build(c, 13);
  m.set_training(false);
  const auto path = temp_path("match.vmw");
  save_model(m, path);
  Model loaded = load_model(path);
  const auto p = synth_pair(13, 64);
  const auto r1 = match_pair(m, p.image_a, p.image_b), r2 = match_pair(loaded, p.image_a, p.image_b);
  ASSERT_EQ(r1.matches.fine.size(), r2.matches.fine.size());
  for (std::size_t i = 0; i < r1.matches.fine.size(); ++i) EXPECT_EQ(r1.matches.fine[i].xb, r2.matches.fine[i].xb);
  fs::remove(path);
}

TEST(Archive, TruncatedFileRejected) {
  auto m = Model::build(small_config(), 14);
  const std::string bytes = archive_bytes(m);
  const auto path = temp_path("trunc.vmw");
  for (std::size_t keep : {std::size_t{0}, std::size_t{5}, std::size_t{14}, std::size_t{40}, bytes.size() - 3}) {
    spit(path, bytes.substr(0, keep));
    EXPECT_THROW(load_model(path), IoError) << keep;
  }
  fs::remove(path);
}

TEST(Archive, VersionMismatchRejected) {
  auto m = Model::build(small_config(), 15);
  std::string bytes = archive_bytes(m);
  bytes[8] = 2;
  const auto path = temp_path("version.vmw");
  spit(path, bytes);
  try {
    load_model(path);
    FAIL() << "expected a version error";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  fs::remove(path);
}

TEST(Archive, MismatchedConfigNamesArray) {
  auto m = Model::build(small_config(), 16);
  const std::string bytes = archive_bytes(m);
  auto other_cfg = small_config();
  other_cfg.fine_dim = 8;
  auto other = Model::build(other_cfg, 16);
  try {
    load_weights(other, parse_archive(bytes, "mem"), "mem");
    FAIL() << "expected a shape mismatch";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch for array 'fine.conv4.weight'"), std::string::npos)
        << e.what();
  }
}

TEST(Archive, BadMagicAndMissingFile) {
  const auto path = temp_path("magic.vmw");
  spit(path, "NOTWEIGHTS and more bytes here");
  EXPECT_THROW(load_model(path), IoError);
  fs::remove(path);
  EXPECT_THROW(load_model(temp_path("does_not_exist.vmw")), IoError);
}

TEST(Archive, CorruptManifestRejected) {
  auto m = Model::build(small_config(), 17);
  std::string bytes = archive_bytes(m);
  bytes[20] = '!';
  EXPECT_THROW(parse_archive(bytes, "mem"), IoError);
}

// -------------------------------------------------------------------- pgm

TEST(Pgm, RoundTripsEightBitValues) {
  Tensor img({1, 3, 5});
  for (std::size_t i = 0; i < 15; ++i) img.mutable_data()[i] = float(i * 17) / 255.0f;
  const auto path = temp_path("img.pgm");
  write_pgm(path, img);
  const auto back = read_pgm(path);
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(back[i], img[i]);
  fs::remove(path);
}

TEST(Pgm, HeaderCommentsAndMaxval) {
  const auto path = temp_path("comment.pgm");
  spit(path, std::string("P5\n# a comment\n2 1\n# another\n100\n") + char(50) + char(100));
  const auto img = read_pgm(path);
  EXPECT_EQ(img.shape(), (Shape{1, 1, 2}));
  EXPECT_FLOAT_EQ(img[0], 0.5f);
  EXPECT_FLOAT_EQ(img[1], 1.0f);
  fs::remove(path);
}

TEST(Pgm, MalformedInputsRejected) {
  const auto path = temp_path("bad.pgm");
  for (const std::string& bytes : {std::string("P2\n2 2\n255\n1 2 3 4"), std::string("P5\n2 2\n255\nab"),
                                   std::string("P5\n2 x\n255\nabcd"), std::string("P5\n2 2\n65535\nabcdefgh"),
                                   std::string("P5\n0 2\n255\n"), std::string("")}) {
    spit(path, bytes);
    EXPECT_THROW(read_pgm(path), ParseError) << bytes;
  }
  fs::remove(path);
  EXPECT_THROW(read_pgm(temp_path("missing.pgm")), IoError);
}

// ------------------------------------------------------------------- eval

TEST(Eval, AucClosedForms) {
  EXPECT_DOUBLE_EQ(error_auc({0, 0, 0}, 3), 1.0);
  EXPECT_DOUBLE_EQ(error_auc({10, 20}, 3), 0.0);
  // One error of 1 px: ramp to 1 over [0,1] then flat: (0.5 + 2) / 3.
  EXPECT_NEAR(error_auc({1.0}, 3), 2.5 / 3.0, 1e-12);
  // Errors 1 and 2 of two pairs: 0.25 + 0.75 + 1 over 3.
  EXPECT_NEAR(error_auc({2.0, 1.0}, 3), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(error_auc({1.0, std::numeric_limits<double>::infinity()}, 3), 1.25 / 3.0, 1e-12);
  EXPECT_EQ(error_auc({}, 3), 0.0);
}

TEST(Eval, DltRecoversExactHomography) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Homography h = random_homography(rng, 128, 128);
    std::vector<Correspondence> corr;
    for (int k = 0; k < 30; ++k) {
      const Point2 a{rng.uniform(0, 127), rng.uniform(0, 127)};
      corr.push_back({a, apply(h, a)});
    }
    const Homography e = estimate_homography(corr);
    EXPECT_LT(corner_error(e, h, 128, 128), 1e-6) << seed;
  }
}

TEST(Eval, TooFewMatchesScoreAsFailure) {
  const std::vector<FineMatch> three{{0, 0, 0, 0, 1}, {5, 0, 5, 0, 1}, {0, 5, 0, 5, 1}};
  const auto s = score_pair(three, Homography::Identity(), 64, 64);
  EXPECT_TRUE(std::isinf(s.corner_error));
  EXPECT_EQ(s.correct, 3u);
  EXPECT_THROW(estimate_homography({}), DomainError);
  const auto r = summarize({s});
  EXPECT_EQ(r.auc3, 0.0);
  EXPECT_EQ(r.precision, 1.0);
}

TEST(Eval, OracleMatchesGivePerfectAuc) {
  const auto rep = evaluate_homography(
      [](const SynthPair& p) {
        std::vector<FineMatch> out;
        for (double y = 4; y < 64; y += 8)
          for (double x = 4; x < 64; x += 8) {
            const Point2 b = apply(p.h, {x, y});
            out.push_back({x, y, b.x, b.y, 1.0});
          }
        return out;
      },
      10, 3, 64);
  EXPECT_NEAR(rep.auc3, 1.0, 1e-6);
  EXPECT_EQ(rep.precision, 1.0);
  EXPECT_EQ(rep.pairs, 10u);
}

TEST(Eval, PrecisionCountsTwoPixelRadius) {
  const std::vector<FineMatch> m{{10, 10, 11.9, 10, 1}, {10, 10, 12.1, 10, 1}, {20, 20, 20, 18.5, 1}, {0, 0, 3, 3, 1}};
  const auto s = score_pair(m, Homography::Identity(), 64, 64);
  EXPECT_EQ(s.correct, 2u);
  EXPECT_EQ(s.matches, 4u);
}

// ------------------------------------------------------------ calibration

TEST(Calibration, SaturatedScoresAgreeAcrossVariants) {
  Rng rng(18);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 12;
    auto s = uniform_tensor<double>({n, n}, -1, 1, rng);
    // A strong diagonal on the first rows only, weak everywhere else.
    for (std::size_t i = 0; i < 6; ++i) s.mutable_data()[i * n + i] = 20.0;
    ModelConfig cfg;
    cfg.border_cells = trial % 2;
    const GridSize g{3, 4};
    const auto [lo, hi] = agreement_interval(ScoredGrids<double>{s, g, g}, cfg);
    ASSERT_LT(lo, hi);
    const auto standard = select_coarse(cfg, s, g, g);
    cfg.optimized = true;
    cfg.raw_threshold = hi;
    EXPECT_EQ(standard, select_coarse(cfg, s, g, g));
  }
}

TEST(CoarseSelection, BorderCellsDropped) {
  Tensor eye({16, 16});
  for (std::size_t i = 0; i < 16; ++i) eye.mutable_data()[i * 17] = 1;
  ModelConfig cfg;
  cfg.threshold = 0.0;
  cfg.border_cells = 1;
  std::vector<std::size_t> kept;
  for (const auto& m : select_coarse(cfg, eye, {4, 4}, {4, 4})) kept.push_back(m.ia);
  EXPECT_EQ(kept, (std::vector<std::size_t>{5, 6, 9, 10}));
  cfg.border_cells = 0;
  EXPECT_EQ(select_coarse(cfg, eye, {4, 4}, {4, 4}).size(), 16u);
  cfg.border_cells = 2;
  EXPECT_TRUE(select_coarse(cfg, eye, {4, 4}, {4, 4}).empty());
}

TEST(CoarseSelection, BorderOfEitherImageDropsTheMatch) {
  // A interior cell 5 matched to B corner cell 0.
  Tensor s = Tensor::full({16, 16}, -5.0f);
  s.mutable_data()[5 * 16 + 0] = 5.0f;
  ModelConfig cfg;
  cfg.border_cells = 0;
  ASSERT_EQ(select_coarse(cfg, s, {4, 4}, {4, 4}).size(), 1u);
  cfg.border_cells = 1;
  EXPECT_TRUE(select_coarse(cfg, s, {4, 4}, {4, 4}).empty());
}

TEST(Calibration, BestThresholdMaximizesCoverage) {
  const std::vector<std::pair<double, double>> iv{{0.0, 1.0}, {0.5, 2.0}, {1.5, 3.0}, {2.5, 2.0}};
  EXPECT_EQ(best_threshold(iv), 1.0);
  EXPECT_EQ(best_threshold({{1.0, 1.0}}), 0.0);
}
