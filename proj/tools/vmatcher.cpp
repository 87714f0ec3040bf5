// vmatcher command-line tool: train, match, eval-homography, bench,
// gradcheck, selftest.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "vmatcher/archive.hpp"
#include "vmatcher/calibration.hpp"
#include "vmatcher/eval.hpp"
#include "vmatcher/layer_gradcheck.hpp"
#include "vmatcher/pgm.hpp"
#include "vmatcher/training.hpp"

using namespace vmatcher;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitContract = 1;
constexpr int kExitNumerical = 2;

void echo_config(const std::string& command, const json& cfg) {
  std::cout << "# " << command << " " << cfg.dump() << "\n";
}

std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  return f;
}

Model load_or_build(const std::string& weights, std::uint64_t seed) {
  if (!weights.empty()) return load_model(weights);
  Model m = Model::build(ModelConfig{}, seed);
  m.set_training(false);
  return m;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string preset = "T";
  std::size_t epochs = 5;
  std::size_t pairs = 200;
  std::size_t size = 128;
  std::uint64_t seed = 0;
  std::string out = "weights.vmw";
  std::string loss_csv;
  double lr = 1e-3;
  double weight_decay = 0.1;
  std::size_t grad_accum = 1;
  std::size_t warmup = 20;
  bool constant_lr = false;
  bool no_augment = false;
  double threshold = ModelConfig{}.threshold;
  std::size_t coarse_dim = 128;
  std::size_t fine_dim = 64;
  std::string direction = "uni";
  bool no_rope = false;
  std::size_t calibration_pairs = 50;
};

int run_train(const TrainArgs& a) {
  ModelConfig mc;
  mc.pattern = preset_pattern(a.preset);
  mc.coarse_dim = a.coarse_dim;
  mc.fine_dim = a.fine_dim;
  mc.direction = a.direction == "bi" ? ScanDirection::Bi : ScanDirection::Uni;
  mc.use_rope = !a.no_rope;
  mc.threshold = a.threshold;
  mc.validate();
  TrainConfig tc;
  tc.optimizer.lr = a.lr;
  tc.optimizer.weight_decay = a.weight_decay;
  tc.grad_accum = a.grad_accum;
  tc.epochs = a.epochs;
  tc.warmup_updates = a.warmup;
  tc.cosine_decay = !a.constant_lr;
  tc.augment = !a.no_augment;
  tc.seed = a.seed;
  const std::string loss_path = a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv;
  echo_config("train", {{"model", mc},
                        {"preset", a.preset},
                        {"epochs", a.epochs},
                        {"pairs", a.pairs},
                        {"size", a.size},
                        {"seed", a.seed},
                        {"lr", a.lr},
                        {"weight_decay", a.weight_decay},
                        {"grad_accum", a.grad_accum},
                        {"warmup", a.warmup},
                        {"cosine", tc.cosine_decay},
                        {"augment", tc.augment},
                        {"calibration_pairs", a.calibration_pairs},
                        {"out", a.out},
                        {"loss_csv", loss_path}});
  Model model = Model::build(mc, a.seed);
  std::cout << "parameters " << model.parameter_count() << "\n";
  const auto data = make_dataset(a.pairs, a.size, mix_seed(a.seed, 0x7261696eULL));
  TrainResult result;
  if (a.epochs > 0) {
    if (data.empty()) throw ContractError("train: --pairs must be >= 1");
    double window = 0;
    std::size_t count = 0;
    result = train_loop(model, data, tc, [&](const LossRecord& r) {
      window += r.total;
      if (++count == data.size()) {
        std::cout << "epoch " << (r.step + 1) / data.size() << " mean_loss " << fmt4(window / double(count)) << "\n";
        window = 0;
        count = 0;
      }
    });
  }
  model.set_training(false);
  // Raw-score threshold for the optimized matcher, fitted on training pairs.
  std::vector<std::pair<double, double>> intervals;
  for (std::size_t i = 0; i < std::min(a.calibration_pairs, data.size()); ++i)
    intervals.push_back(
        agreement_interval(inference_scores(model, data[i].pair.image_a, data[i].pair.image_b), model.config()));
  model.mutable_config().raw_threshold = best_threshold(intervals);
  std::cout << "raw_threshold " << fmt4(model.config().raw_threshold) << "\n";
  save_model(model, a.out);
  auto f = open_out(loss_path);
  write_loss_csv(f, result.trace);
  if (!result.trace.empty())
    std::cout << "loss initial " << fmt4(result.trace.front().total) << " final " << fmt4(result.trace.back().total)
              << "\n";
  std::cout << "warnings empty_coarse=" << result.warnings.empty_coarse << " empty_fine1=" << result.warnings.empty_fine1
            << " empty_fine2=" << result.warnings.empty_fine2 << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ match

struct MatchArgs {
  std::string weights;
  std::string image_a, image_b;
  bool optimized = false;
  std::string out = "matches.csv";
  std::string timings;
};

int run_match(const MatchArgs& a) {
  const std::string timing_path = a.timings.empty() ? a.out + ".timings.csv" : a.timings;
  echo_config("match", {{"weights", a.weights},
                        {"image_a", a.image_a},
                        {"image_b", a.image_b},
                        {"optimized", a.optimized},
                        {"out", a.out},
                        {"timings", timing_path}});
  Model model = load_model(a.weights);
  model.mutable_config().optimized = a.optimized;
  const Tensor ia = read_pgm(a.image_a), ib = read_pgm(a.image_b);
  const auto r = match_pair(model, ia, ib);
  auto f = open_out(a.out);
  f << "xa,ya,xb,yb,confidence\n";
  for (const auto& m : r.matches.fine)
    f << fmt4(m.xa) << "," << fmt4(m.ya) << "," << fmt4(m.xb) << "," << fmt4(m.yb) << "," << fmt4(m.confidence) << "\n";
  auto t = open_out(timing_path);
  write_timings_csv(t, r.timings);
  std::cout << "coarse_matches " << r.matches.coarse.size() << "\nfine_matches " << r.matches.fine.size() << "\n";
  return kExitOk;
}

// -------------------------------------------------------- eval-homography

struct EvalArgs {
  std::string weights;
  std::size_t pairs = 50;
  std::uint64_t seed = 0;
  std::size_t size = 128;
  bool optimized = false;
  bool oracle = false;
};

int run_eval(const EvalArgs& a) {
  echo_config("eval-homography", {{"weights", a.weights},
                                  {"pairs", a.pairs},
                                  {"seed", a.seed},
                                  {"size", a.size},
                                  {"optimized", a.optimized},
                                  {"oracle", a.oracle}});
  EvalReport rep;
  if (a.oracle) {
    // Ground-truth warps of the cell centres: an upper bound for the harness.
    rep = evaluate_homography(
        [&](const SynthPair& p) {
          std::vector<FineMatch> out;
          const GridSize g{a.size / 8, a.size / 8};
          const auto gt = gt_from_homography(p.h, g, g);
          for (std::size_t k = 0; k < gt.coarse_pairs.size(); ++k) {
            const Point2 c = cell_centre(gt.coarse_pairs[k].first, g.w);
            out.push_back({c.x, c.y, gt.fine_targets[k].x, gt.fine_targets[k].y, 1.0});
          }
          return out;
        },
        a.pairs, a.seed, a.size);
  } else {
    Model model = load_or_build(a.weights, a.seed);
    model.mutable_config().optimized = a.optimized;
    rep = evaluate_homography([&](const SynthPair& p) { return match_pair(model, p.image_a, p.image_b).matches.fine; },
                              a.pairs, a.seed, a.size);
  }
  std::cout << "pairs " << rep.pairs << "\nmatches " << rep.matches << "\ncorrect_2px " << rep.correct
            << "\nprecision_2px " << fmt4(rep.precision) << "\nauc_3px " << fmt4(rep.auc3) << "\nauc_5px "
            << fmt4(rep.auc5) << "\nauc_10px " << fmt4(rep.auc10) << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ bench

struct BenchArgs {
  std::string weights;
  std::string sizes = "128,256,512";
  std::size_t runs = 20;
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
  std::string out;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int run_bench(const BenchArgs& a) {
  std::vector<std::size_t> sizes;
  {
    std::stringstream ss(a.sizes);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      std::size_t pos = 0;
      unsigned long v = 0;
      try {
        v = std::stoul(tok, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != tok.size() || v == 0 || v % 8 != 0)
        throw ContractError("bench: size '" + tok + "' is not a positive multiple of 8");
      sizes.push_back(v);
    }
  }
  if (a.runs == 0) throw ContractError("bench: --runs must be >= 1");
  echo_config("bench", {{"weights", a.weights}, {"sizes", sizes}, {"runs", a.runs}, {"warmup", a.warmup}, {"seed", a.seed}});
  Model model = load_or_build(a.weights, a.seed);
  std::ostringstream csv;
  csv << "size,stage,median_ms\n";
  for (std::size_t s : sizes) {
    const SynthPair p = synth_pair(mix_seed(a.seed, s), s);
    for (std::size_t i = 0; i < a.warmup; ++i) match_pair(model, p.image_a, p.image_b);
    std::vector<double> bb, hy, co, fi, to;
    for (std::size_t i = 0; i < a.runs; ++i) {
      const auto t = match_pair(model, p.image_a, p.image_b).timings;
      bb.push_back(t.backbone_ms);
      hy.push_back(t.hybrid_ms);
      co.push_back(t.coarse_ms);
      fi.push_back(t.fine_ms);
      to.push_back(t.total_ms);
    }
    csv << s << ",backbone," << fmt4(median(bb)) << "\n"
        << s << ",hybrid," << fmt4(median(hy)) << "\n"
        << s << ",coarse," << fmt4(median(co)) << "\n"
        << s << ",fine," << fmt4(median(fi)) << "\n"
        << s << ",total," << fmt4(median(to)) << "\n";
  }
  std::cout << csv.str();
  if (!a.out.empty()) {
    auto f = open_out(a.out);
    f << csv.str();
  }
  return kExitOk;
}

// -------------------------------------------------------------- gradcheck

struct GradArgs {
  std::uint64_t seed = 0;
  std::string fault_op;
};

int run_gradcheck(const GradArgs& a) {
  echo_config("gradcheck", {{"seed", a.seed}, {"fault_op", a.fault_op}, {"tolerance", kGradTolerance}});
  Tape<double>::fault_op() = a.fault_op;
  const auto reports = gradcheck_all_markers(a.seed);
  Tape<double>::fault_op().clear();
  std::vector<std::string> failed;
  for (const auto& r : reports) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-2s max_rel_error %.3e worst %s %s\n", r.marker.c_str(), r.max_rel_error,
                  r.worst_tensor.c_str(), r.passed ? "PASS" : "FAIL");
    std::cout << buf;
    if (!r.passed) failed.push_back(r.marker);
  }
  if (failed.empty()) return kExitOk;
  std::string list;
  for (const auto& f : failed) list += (list.empty() ? "" : ",") + f;
  std::cerr << "gradcheck failed for layers: " << list;
  if (!a.fault_op.empty()) std::cerr << " (fault injected into op '" << a.fault_op << "')";
  std::cerr << "\n";
  return kExitNumerical;
}

// --------------------------------------------------------------- selftest

int run_selftest(std::uint64_t seed) {
  echo_config("selftest", {{"seed", seed}});
  ModelConfig cfg;
  cfg.coarse_dim = 32;
  cfg.fine_dim = 16;
  cfg.mlp_dim = 64;
  cfg.threshold = 0.0;
  Model model = Model::build(cfg, seed);
  model.set_training(false);
  const SynthPair p = synth_pair(seed, 64);
  bool ok = true;
  auto check = [&](const char* name, bool pass) {
    std::cout << name << " " << (pass ? "PASS" : "FAIL") << "\n";
    ok = ok && pass;
  };
  const auto self = match_pair(model, p.image_a, p.image_a);
  check("self_match_identity", std::all_of(self.matches.coarse.begin(), self.matches.coarse.end(),
                                           [](const CoarseMatch& m) { return m.ia == m.ib; }));
  const auto r1 = match_pair(model, p.image_a, p.image_b), r2 = match_pair(model, p.image_a, p.image_b);
  bool same = r1.matches.fine.size() == r2.matches.fine.size();
  for (std::size_t i = 0; same && i < r1.matches.fine.size(); ++i)
    same = r1.matches.fine[i].xb == r2.matches.fine[i].xb && r1.matches.fine[i].yb == r2.matches.fine[i].yb;
  check("deterministic_matching", same);
  const std::string bytes = archive_bytes(model);
  Model copy = Model::build(cfg, seed + 1);
  load_weights(copy, parse_archive(bytes, "<memory>"), "<memory>");
  copy.set_training(false);
  check("archive_round_trip", archive_bytes(copy) == bytes);
  bool grads = true;
  for (const auto& r : gradcheck_all_markers(seed, 4)) grads = grads && r.passed;
  check("layer_gradients", grads);
  return ok ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid Mamba-Transformer semi-dense feature matcher"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train on generated synthetic homography pairs");
  train->add_option("--preset", ta.preset, "Layer pattern preset")->check(CLI::IsMember({"B", "T"}));
  train->add_option("--epochs", ta.epochs, "Passes over the generated set");
  train->add_option("--pairs", ta.pairs, "Number of generated training pairs");
  train->add_option("--size", ta.size, "Square image size (multiple of 8)");
  train->add_option("--seed", ta.seed, "Seed for weights, data and shuffling");
  train->add_option("--out", ta.out, "Weight archive path");
  train->add_option("--loss-csv", ta.loss_csv, "Loss trace path (default <out>.loss.csv)");
  train->add_option("--lr", ta.lr, "AdamW learning rate");
  train->add_option("--weight-decay", ta.weight_decay, "AdamW decoupled weight decay");
  train->add_option("--grad-accum", ta.grad_accum, "Samples per optimizer update");
  train->add_option("--warmup", ta.warmup, "Linear warmup length in updates");
  train->add_flag("--constant-lr", ta.constant_lr, "Disable cosine learning-rate decay");
  train->add_flag("--no-augment", ta.no_augment, "Disable per-step random symmetry and A/B swap");
  train->add_option("--threshold", ta.threshold, "Coarse match probability threshold stored with the weights");
  train->add_option("--coarse-dim", ta.coarse_dim, "Channels at 1/8 resolution");
  train->add_option("--fine-dim", ta.fine_dim, "Channels of the fine map");
  train->add_option("--direction", ta.direction, "Scan direction")->check(CLI::IsMember({"uni", "bi"}));
  train->add_flag("--no-rope", ta.no_rope, "Disable rotary embeddings in self-attention");
  train->add_option("--calibration-pairs", ta.calibration_pairs, "Training pairs used to fit the raw-score threshold");

  MatchArgs ma;
  auto* match = app.add_subcommand("match", "Match two PGM images");
  match->add_option("--weights", ma.weights, "Weight archive")->required();
  match->add_option("image_a", ma.image_a, "First image (P5 PGM)")->required();
  match->add_option("image_b", ma.image_b, "Second image (P5 PGM)")->required();
  match->add_flag("--optimized", ma.optimized, "Select matches on raw scores (no dual softmax)");
  match->add_option("--out", ma.out, "Match CSV path");
  match->add_option("--timings", ma.timings, "Stage timing CSV path (default <out>.timings.csv)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval-homography", "Homography accuracy on synthetic pairs");
  eval->add_option("--weights", ea.weights, "Weight archive (random weights when omitted)");
  eval->add_option("--pairs", ea.pairs, "Number of evaluation pairs");
  eval->add_option("--seed", ea.seed, "Evaluation seed");
  eval->add_option("--size", ea.size, "Square image size (multiple of 8)");
  eval->add_flag("--optimized", ea.optimized, "Select matches on raw scores");
  eval->add_flag("--oracle", ea.oracle, "Score ground-truth matches instead of the model");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Per-stage timing across image sizes");
  bench->add_option("--weights", ba.weights, "Weight archive (random weights when omitted)");
  bench->add_option("--sizes", ba.sizes, "Comma-separated square sizes");
  bench->add_option("--runs", ba.runs, "Timed runs per size");
  bench->add_option("--warmup", ba.warmup, "Untimed runs per size");
  bench->add_option("--seed", ba.seed, "Seed for inputs and random weights");
  bench->add_option("--out", ba.out, "Also write the CSV here");

  GradArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every layer type");
  grad->add_option("--seed", ga.seed, "Seed");
  grad->add_option("--fault-op", ga.fault_op, "Test hook: corrupt the backward pass of this op");

  std::uint64_t self_seed = 0;
  auto* self = app.add_subcommand("selftest", "Quick end-to-end consistency checks");
  self->add_option("--seed", self_seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitContract;
  }

  try {
    if (*train) return run_train(ta);
    if (*match) return run_match(ma);
    if (*eval) return run_eval(ea);
    if (*bench) return run_bench(ba);
    if (*grad) return run_gradcheck(ga);
    if (*self) return run_selftest(self_seed);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitContract;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitContract;
  }
  return kExitContract;
}
