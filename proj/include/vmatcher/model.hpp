#pragma once

// Full matcher: backbone, hybrid Mamba/attention stack over the 1/8 token
// grids, coarse matching and two-stage fine refinement.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vmatcher/backbone.hpp"
#include "vmatcher/ds_transformer.hpp"
#include "vmatcher/mamba_vision.hpp"
#include "vmatcher/matcher.hpp"
#include "vmatcher/supervision.hpp"

namespace vmatcher {

enum class LayerKind { Mamba, MambaS, Gmlp, SelfAttn, CrossAttn };

inline const char* layer_token(LayerKind k) {
  switch (k) {
    case LayerKind::Mamba: return "M";
    case LayerKind::MambaS: return "Ms";
    case LayerKind::Gmlp: return "G";
    case LayerKind::SelfAttn: return "S";
    case LayerKind::CrossAttn: return "C";
  }
  return "?";
}

inline constexpr std::string_view kPresetT = "M G Ms G S M G Ms G C M G Ms G";
inline constexpr std::string_view kPresetB = "M G Ms G S M G Ms G C M G Ms G S M G Ms G C M G Ms G";

/// Whitespace-separated tokens over {M, Ms, G, S, C}.
inline std::vector<LayerKind> parse_pattern(std::string_view pattern) {
  std::istringstream in{std::string(pattern)};
  std::vector<LayerKind> out;
  std::string tok;
  while (in >> tok) {
    if (tok == "M") out.push_back(LayerKind::Mamba);
    else if (tok == "Ms") out.push_back(LayerKind::MambaS);
    else if (tok == "G") out.push_back(LayerKind::Gmlp);
    else if (tok == "S") out.push_back(LayerKind::SelfAttn);
    else if (tok == "C") out.push_back(LayerKind::CrossAttn);
    else
      throw ParseError("layer pattern: unknown token '" + tok + "' at position " + std::to_string(out.size() + 1));
  }
  return out;
}

inline std::string pattern_string(const std::vector<LayerKind>& kinds) {
  std::string s;
  for (auto k : kinds) {
    if (!s.empty()) s += ' ';
    s += layer_token(k);
  }
  return s;
}

inline std::string preset_pattern(std::string_view name) {
  if (name == "T") return std::string(kPresetT);
  if (name == "B") return std::string(kPresetB);
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected B or T)");
}

struct ModelConfig {
  std::string pattern{kPresetT};
  std::size_t coarse_dim = 128;
  std::size_t fine_dim = 64;
  std::size_t state_dim = 16;
  std::size_t heads = 1;
  std::size_t mlp_dim = 256;
  std::size_t ds_factor = 4;
  std::size_t patch = 8;
  ScanDirection direction = ScanDirection::Uni;
  bool use_rope = true;
  bool optimized = false;
  double threshold = 0.2;      // on dual-softmax probabilities
  double raw_threshold = 0.0;  // on raw scores, optimized variant
  double temperature = 0.1;
  std::size_t border_cells = 1;  // coarse matches this close to either grid edge are dropped

  BackboneConfig backbone() const { return {{coarse_dim / 4, coarse_dim / 2, coarse_dim}, 3}; }

  void validate() const {
    parse_pattern(pattern);
    if (coarse_dim == 0 || coarse_dim % 2 != 0) {
      throw ConfigError("coarse_dim must be even and non-zero, got " + std::to_string(coarse_dim));
    }
    if (coarse_dim % 4 != 0) throw ConfigError("coarse_dim must be divisible by 4 for the backbone widths");
    if (fine_dim == 0 || state_dim == 0 || mlp_dim == 0) throw ConfigError("fine_dim, state_dim and mlp_dim must be non-zero");
    if (patch < 4 || patch % 2 != 0) throw ConfigError("patch must be an even size >= 4");
    if (!(threshold >= 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in [0, 1)");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"pattern", c.pattern},
                     {"coarse_dim", c.coarse_dim},
                     {"fine_dim", c.fine_dim},
                     {"state_dim", c.state_dim},
                     {"heads", c.heads},
                     {"mlp_dim", c.mlp_dim},
                     {"ds_factor", c.ds_factor},
                     {"patch", c.patch},
                     {"direction", c.direction == ScanDirection::Bi ? "bi" : "uni"},
                     {"use_rope", c.use_rope},
                     {"optimized", c.optimized},
                     {"threshold", c.threshold},
                     {"raw_threshold", c.raw_threshold},
                     {"temperature", c.temperature},
                     {"border_cells", c.border_cells}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.pattern = j.at("pattern").get<std::string>();
  c.coarse_dim = j.at("coarse_dim").get<std::size_t>();
  c.fine_dim = j.at("fine_dim").get<std::size_t>();
  c.state_dim = j.at("state_dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.mlp_dim = j.at("mlp_dim").get<std::size_t>();
  c.ds_factor = j.at("ds_factor").get<std::size_t>();
  c.patch = j.at("patch").get<std::size_t>();
  const auto dir = j.at("direction").get<std::string>();
  if (dir != "uni" && dir != "bi") throw ConfigError("direction must be uni or bi, got " + dir);
  c.direction = dir == "bi" ? ScanDirection::Bi : ScanDirection::Uni;
  c.use_rope = j.at("use_rope").get<bool>();
  c.optimized = j.at("optimized").get<bool>();
  c.threshold = j.at("threshold").get<double>();
  c.raw_threshold = j.at("raw_threshold").get<double>();
  c.temperature = j.at("temperature").get<double>();
  c.border_cells = j.at("border_cells").get<std::size_t>();
}

template <typename T>
struct HybridLayer {
  LayerKind kind = LayerKind::Mamba;
  MambaVisionLayer<T> mamba;
  GatedMlpLayer<T> mlp;
  DsAttentionLayer<T> attn;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    switch (kind) {
      case LayerKind::Mamba:
      case LayerKind::MambaS: mamba.visit(prefix, f); break;
      case LayerKind::Gmlp: mlp.visit(prefix, f); break;
      case LayerKind::SelfAttn:
      case LayerKind::CrossAttn: attn.visit(prefix, f); break;
    }
  }
};

/// One image's 1/8 token grid [h*w, C].
template <typename T>
struct TokenGrid {
  BasicTensor<T> tokens;
  GridSize grid;

  BasicTensor<T> as_hwc() const { return reshape(tokens, {grid.h, grid.w, tokens.dim(1)}); }
};

/// Applies one hybrid layer to both images. M, Ms, G and S act on each image
/// with shared weights; C updates A from B and B from A, both reading the
/// features from before the layer.
template <typename T>
void apply_hybrid_layer(const HybridLayer<T>& l, TokenGrid<T>& a, TokenGrid<T>& b) {
  const std::size_t c = a.tokens.dim(1);
  switch (l.kind) {
    case LayerKind::Mamba:
    case LayerKind::MambaS:
      a.tokens = mamba_vision_grid(l.mamba, a.tokens, a.grid.h, a.grid.w);
      b.tokens = mamba_vision_grid(l.mamba, b.tokens, b.grid.h, b.grid.w);
      break;
    case LayerKind::Gmlp:
      a.tokens = gmlp(l.mlp, a.tokens);
      b.tokens = gmlp(l.mlp, b.tokens);
      break;
    case LayerKind::SelfAttn: {
      auto ga = a.as_hwc(), gb = b.as_hwc();
      a.tokens = reshape(ds_attention(l.attn, ga, ga), {a.grid.cells(), c});
      b.tokens = reshape(ds_attention(l.attn, gb, gb), {b.grid.cells(), c});
      break;
    }
    case LayerKind::CrossAttn: {
      auto ga = a.as_hwc(), gb = b.as_hwc();
      auto na = ds_attention(l.attn, ga, gb);
      auto nb = ds_attention(l.attn, gb, ga);
      a.tokens = reshape(na, {a.grid.cells(), c});
      b.tokens = reshape(nb, {b.grid.cells(), c});
      break;
    }
  }
}

struct StageTimings {
  double backbone_ms = 0.0;
  double hybrid_ms = 0.0;
  double coarse_ms = 0.0;
  double fine_ms = 0.0;
  double total_ms = 0.0;

  double stage_sum() const { return backbone_ms + hybrid_ms + coarse_ms + fine_ms; }
};

inline void write_timings_csv(std::ostream& os, const StageTimings& t) {
  os << "stage,milliseconds\n";
  os << "backbone," << t.backbone_ms << "\n";
  os << "hybrid," << t.hybrid_ms << "\n";
  os << "coarse," << t.coarse_ms << "\n";
  os << "fine," << t.fine_ms << "\n";
  os << "total," << t.total_ms << "\n";
}

template <typename T>
class VMatcher {
 public:
  static VMatcher build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    VMatcher m;
    m.config_ = cfg;
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    const auto bb = cfg.backbone();
    m.backbone_ = Backbone<T>::init(bb, rng);
    for (auto kind : parse_pattern(cfg.pattern)) {
      HybridLayer<T> l;
      l.kind = kind;
      switch (kind) {
        case LayerKind::Mamba:
          l.mamba = MambaVisionLayer<T>::init(cfg.coarse_dim, cfg.state_dim, ScanOrder::RowMajor, cfg.direction, rng);
          break;
        case LayerKind::MambaS:
          l.mamba = MambaVisionLayer<T>::init(cfg.coarse_dim, cfg.state_dim, ScanOrder::ColumnMajor, cfg.direction, rng);
          break;
        case LayerKind::Gmlp: l.mlp = GatedMlpLayer<T>::init(cfg.coarse_dim, cfg.mlp_dim, rng); break;
        case LayerKind::SelfAttn:
          l.attn = DsAttentionLayer<T>::init(cfg.coarse_dim, cfg.heads, cfg.ds_factor, AttentionMode::Self, cfg.use_rope, rng);
          break;
        case LayerKind::CrossAttn:
          l.attn = DsAttentionLayer<T>::init(cfg.coarse_dim, cfg.heads, cfg.ds_factor, AttentionMode::Cross, false, rng);
          break;
      }
      m.layers_.push_back(std::move(l));
    }
    m.fine_ = FineFuseLayer<T>::init(bb.channels[0], bb.channels[1], bb.channels[2], cfg.fine_dim, rng);
    return m;
  }

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  Backbone<T>& backbone() { return backbone_; }
  std::vector<HybridLayer<T>>& layers() { return layers_; }
  const std::vector<HybridLayer<T>>& layers() const { return layers_; }
  FineFuseLayer<T>& fine() { return fine_; }
  const FineFuseLayer<T>& fine() const { return fine_; }

  /// Every stored array with a stable name; f(name, tensor&, trainable).
  template <typename F>
  void visit(F&& f) {
    backbone_.visit("backbone.", f);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].visit("layers." + std::to_string(i) + "." + layer_token(layers_[i].kind) + ".", f);
    fine_.visit("fine.", f);
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, BasicTensor<T>& t, bool trainable) {
      if (trainable) n += t.size();
    });
    return n;
  }

  /// Training mode uses batch statistics in the backbone; inference mode
  /// uses running statistics folded into the convolutions.
  void set_training(bool training) {
    backbone_.set_training(training);
    if (training) backbone_.unfuse();
    else backbone_.fuse();
  }

  /// [1,H,W] image (multiples of 8) -> backbone maps.
  FeatureMaps<T> extract(const BasicTensor<T>& image) { return backbone_.extract(image); }

  static TokenGrid<T> to_tokens(const BasicTensor<T>& f8) {
    const std::size_t c = f8.dim(0);
    GridSize g{f8.dim(1), f8.dim(2)};
    return {reshape(detail::chw_to_hwc(f8), {g.cells(), c}), g};
  }

  void run_hybrid(TokenGrid<T>& a, TokenGrid<T>& b) const {
    for (const auto& l : layers_) apply_hybrid_layer(l, a, b);
  }

  /// S = <a/sqrt(C), b/sqrt(C)> / temperature.
  BasicTensor<T> score_matrix(const TokenGrid<T>& a, const TokenGrid<T>& b) const {
    const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(a.tokens.dim(1))));
    return coarse_scores(scale(a.tokens, s), scale(b.tokens, s), static_cast<T>(config_.temperature)).scores;
  }

  /// Fine map as row-major tokens [H/2 * W/2, Cf].
  BasicTensor<T> fine_tokens(const TokenGrid<T>& coarse, const FeatureMaps<T>& maps) const {
    auto chw = detail::hwc_to_chw(coarse.as_hwc());
    auto f = fine_fuse(fine_, chw, maps.f4, maps.f2);
    const std::size_t cf = f.dim(0), h = f.dim(1), w = f.dim(2);
    return reshape(detail::chw_to_hwc(f), {h * w, cf});
  }

 private:
  ModelConfig config_;
  Backbone<T> backbone_;
  std::vector<HybridLayer<T>> layers_;
  FineFuseLayer<T> fine_;
};

using Model = VMatcher<float>;

/// Zero-pads a [1,H,W] image on the right and bottom to multiples of 8.
template <typename T>
BasicTensor<T> pad_to_multiple_of_8(const BasicTensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 1 || image.dim(1) == 0 || image.dim(2) == 0)
    throw DimensionError("expected a non-empty [1,H,W] image, got " + to_string(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::size_t ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  if (ph == h && pw == w) return image;
  BasicTensor<T> out({1, ph, pw});
  auto o = out.mutable_data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) o[y * pw + x] = image[y * w + x];
  return out;
}

struct MatchResult {
  MatchSet matches;
  StageTimings timings;
};

/// Removes matches whose cell lies within `border` cells of its grid's edge.
inline void drop_border_matches(std::vector<CoarseMatch>& matches, GridSize ga, GridSize gb, std::size_t border) {
  if (border == 0) return;
  auto near_edge = [border](std::size_t cell, GridSize g) {
    const std::size_t x = cell % g.w, y = cell / g.w;
    return x < border || y < border || x + border >= g.w || y + border >= g.h;
  };
  std::erase_if(matches, [&](const CoarseMatch& m) { return near_edge(m.ia, ga) || near_edge(m.ib, gb); });
}

/// MNN with the configured threshold, on dual-softmax probabilities or, for
/// the optimized variant, on raw scores; then border removal. Mutual
/// maxima are taken over the full grids before border cells are dropped.
template <typename T>
std::vector<CoarseMatch> select_coarse(const ModelConfig& cfg, const BasicTensor<T>& scores, GridSize ga, GridSize gb) {
  auto m = cfg.optimized ? mnn_select(scores, cfg.raw_threshold) : mnn_select(dual_softmax(scores), cfg.threshold);
  drop_border_matches(m, ga, gb, cfg.border_cells);
  return m;
}

/// Coarse-to-fine matching of two [1,H,W] images in inference mode. Images
/// are zero-padded to multiples of 8; fine matches are reported in the
/// original pixel frames and dropped when either pixel falls in the padding.
template <typename T>
MatchResult match_pair(VMatcher<T>& model, const BasicTensor<T>& image_a, const BasicTensor<T>& image_b) {
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
  };
  NoGradScope<T> no_grad;
  const ModelConfig& cfg = model.config();
  MatchResult r;
  const auto t0 = clock::now();
  const auto pa = pad_to_multiple_of_8(image_a), pb = pad_to_multiple_of_8(image_b);
  auto maps_a = model.extract(pa);
  auto maps_b = model.extract(pb);
  const auto t1 = clock::now();

  auto ta = VMatcher<T>::to_tokens(maps_a.f8);
  auto tb = VMatcher<T>::to_tokens(maps_b.f8);
  model.run_hybrid(ta, tb);
  const auto t2 = clock::now();

  auto scores = model.score_matrix(ta, tb);
  r.matches.coarse = select_coarse(cfg, scores, ta.grid, tb.grid);
  const auto t3 = clock::now();

  if (!r.matches.coarse.empty()) {
    auto fa = model.fine_tokens(ta, maps_a);
    auto fb = model.fine_tokens(tb, maps_b);
    const std::size_t fha = maps_a.f2.dim(1), fwa = maps_a.f2.dim(2);
    const std::size_t fhb = maps_b.f2.dim(1), fwb = maps_b.f2.dim(2);
    const double wa = static_cast<double>(image_a.dim(2)), ha = static_cast<double>(image_a.dim(1));
    const double wb = static_cast<double>(image_b.dim(2)), hb = static_cast<double>(image_b.dim(1));
    for (const auto& cm : r.matches.coarse) {
      const auto ia = fine_patch_indices(cm.ia, ta.grid.w, fha, fwa, cfg.patch);
      const auto ib = fine_patch_indices(cm.ib, tb.grid.w, fhb, fwb, cfg.patch);
      const auto pm = refine_stage1(gather_rows(fa, ia), gather_rows(fb, ib));
      if (!pm || ia[pm->ka] < 0 || ib[pm->kb] < 0) continue;
      const auto ua = static_cast<std::size_t>(ia[pm->ka]), ub = static_cast<std::size_t>(ib[pm->kb]);
      const double uax = static_cast<double>(ua % fwa), uay = static_cast<double>(ua / fwa);
      const auto ubx = static_cast<std::ptrdiff_t>(ub % fwb), uby = static_cast<std::ptrdiff_t>(ub / fwb);
      const auto off = refine_stage2(gather_rows(fa, {static_cast<std::ptrdiff_t>(ua)}),
                                     gather_rows(fb, neighbourhood_indices(ubx, uby, fhb, fwb)));
      FineMatch fm;
      fm.xa = fine_to_full(uax);
      fm.ya = fine_to_full(uay);
      const double bx = fine_to_full(static_cast<double>(ubx)), by = fine_to_full(static_cast<double>(uby));
      if (fm.xa > wa - 1 || fm.ya > ha - 1 || bx > wb - 1 || by > hb - 1) continue;
      fm.xb = std::clamp(fine_to_full(static_cast<double>(ubx) + off.dx), 0.0, wb - 1);
      fm.yb = std::clamp(fine_to_full(static_cast<double>(uby) + off.dy), 0.0, hb - 1);
      fm.confidence = cm.confidence;
      r.matches.fine.push_back(fm);
    }
  }
  const auto t4 = clock::now();
  r.timings = {ms(t0, t1), ms(t1, t2), ms(t2, t3), ms(t3, t4), ms(t0, t4)};
  return r;
}

}  // namespace vmatcher
