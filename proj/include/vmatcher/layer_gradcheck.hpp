#pragma once

// Finite-difference check of every hybrid layer marker, run through the same
// two-image dispatch the model uses.

#include <cstdint>
#include <string>
#include <vector>

#include "vmatcher/gradcheck.hpp"
#include "vmatcher/model.hpp"

namespace vmatcher {

struct LayerGradReport {
  std::string marker;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
  bool passed = false;
};

inline constexpr double kGradTolerance = 1e-2;

/// Small 64-bit instance of one marker: 8 channels on 4x4 grids.
inline LayerGradReport gradcheck_marker(LayerKind kind, std::uint64_t seed, std::size_t samples = 8) {
  constexpr std::size_t c = 8, side = 4;
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(kind) + 1));
  HybridLayer<double> l;
  l.kind = kind;
  switch (kind) {
    case LayerKind::Mamba:
    case LayerKind::MambaS:
      l.mamba = MambaVisionLayer<double>::init(c, 4, kind == LayerKind::Mamba ? ScanOrder::RowMajor : ScanOrder::ColumnMajor,
                                               ScanDirection::Uni, rng);
      // Larger step weights so the input-dependent step carries gradient.
      for (auto& v : l.mamba.ssm.w_delta.mutable_data()) v *= 10;
      break;
    case LayerKind::Gmlp: l.mlp = GatedMlpLayer<double>::init(c, 2 * c, rng); break;
    case LayerKind::SelfAttn: l.attn = DsAttentionLayer<double>::init(c, 2, 2, AttentionMode::Self, true, rng); break;
    case LayerKind::CrossAttn: l.attn = DsAttentionLayer<double>::init(c, 2, 2, AttentionMode::Cross, false, rng); break;
  }
  const GridSize g{side, side};
  auto xa = uniform_tensor<double>({g.cells(), c}, -1, 1, rng);
  auto xb = uniform_tensor<double>({g.cells(), c}, -1, 1, rng);
  const auto ra = uniform_tensor<double>({g.cells(), c}, -1, 1, rng);
  const auto rb = uniform_tensor<double>({g.cells(), c}, -1, 1, rng);
  NamedTensors<double> inputs{{"input_a", xa}, {"input_b", xb}};
  l.visit("", [&](const std::string& name, BasicTensor<double>& t, bool trainable) {
    if (trainable) inputs.push_back({name, t});
  });
  auto loss = [&] {
    TokenGrid<double> a{xa, g}, b{xb, g};
    apply_hybrid_layer(l, a, b);
    return add(sum(mul(a.tokens, ra)), sum(mul(b.tokens, rb)));
  };
  const auto r = check_gradients<double>(loss, inputs, rng, samples, 1e-3);
  return {layer_token(kind), r.max_rel_error, r.worst_tensor, r.checked, r.max_rel_error < kGradTolerance};
}

inline std::vector<LayerGradReport> gradcheck_all_markers(std::uint64_t seed, std::size_t samples = 8) {
  std::vector<LayerGradReport> out;
  for (auto k : {LayerKind::Mamba, LayerKind::MambaS, LayerKind::Gmlp, LayerKind::SelfAttn, LayerKind::CrossAttn})
    out.push_back(gradcheck_marker(k, seed, samples));
  return out;
}

}  // namespace vmatcher
