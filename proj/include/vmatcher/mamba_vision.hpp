#pragma once

#include <cstddef>
#include <string>

#include "vmatcher/layers.hpp"
#include "vmatcher/ssm.hpp"

namespace vmatcher {

enum class ScanOrder { RowMajor, ColumnMajor };
enum class ScanDirection { Uni, Bi };

/// MambaVision token mixer over a [L, C] sequence.
///
/// Two half-width branches read the normalized input: the SSM branch
/// (linear -> conv -> SiLU -> selective scan) and the symmetric branch
/// (linear -> conv -> SiLU). Their concatenation is projected back to C and
/// added to the input.
template <typename T>
struct MambaVisionLayer {
  LayerNorm<T> norm;
  Linear<T> proj_in_x;  // C -> C/2
  Linear<T> proj_in_z;  // C -> C/2
  DepthwiseConv1d<T> conv_x;
  DepthwiseConv1d<T> conv_z;
  SsmParams<T> ssm;
  Linear<T> proj_out;  // C -> C
  ScanOrder order = ScanOrder::RowMajor;
  ScanDirection direction = ScanDirection::Uni;

  static MambaVisionLayer init(std::size_t channels, std::size_t state, ScanOrder order, ScanDirection direction,
                               Rng& rng) {
    if (channels == 0 || channels % 2 != 0) {
      throw ConfigError("MambaVision needs an even, non-zero channel count, got " + std::to_string(channels));
    }
    const std::size_t half = channels / 2;
    MambaVisionLayer l;
    l.norm = LayerNorm<T>::init(channels);
    l.proj_in_x = Linear<T>::init(channels, half, rng);
    l.proj_in_z = Linear<T>::init(channels, half, rng);
    l.conv_x = DepthwiseConv1d<T>::init(half, 3, rng);
    l.conv_z = DepthwiseConv1d<T>::init(half, 3, rng);
    l.ssm = SsmParams<T>::init(half, state, rng);
    l.proj_out = Linear<T>::init(channels, channels, rng);
    l.order = order;
    l.direction = direction;
    return l;
  }

  std::size_t channels() const { return proj_out.out_features(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + "norm.", f);
    proj_in_x.visit(prefix + "proj_in_x.", f);
    proj_in_z.visit(prefix + "proj_in_z.", f);
    conv_x.visit(prefix + "conv_x.", f);
    conv_z.visit(prefix + "conv_z.", f);
    ssm.visit(prefix + "ssm.", f);
    proj_out.visit(prefix + "proj_out.", f);
  }
};

namespace detail {

template <typename T>
void require_tokens(const MambaVisionLayer<T>& layer, const BasicTensor<T>& x) {
  require(x.rank() == 2 && x.dim(1) == layer.channels() && x.dim(0) >= 1,
          "MambaVision: expected [L," + std::to_string(layer.channels()) + "], got " + to_string(x.shape()));
}

// Linear -> length-preserving conv over the sequence axis -> SiLU.
template <typename T>
BasicTensor<T> conv_branch(const Linear<T>& proj, const DepthwiseConv1d<T>& conv, const BasicTensor<T>& u) {
  return silu(transpose(conv(transpose(proj(u)))));
}

}  // namespace detail

/// Concatenation of the SSM and symmetric branches before the output
/// projection, for already-normalized tokens u[L, C].
template <typename T>
BasicTensor<T> mamba_core(const MambaVisionLayer<T>& layer, const BasicTensor<T>& u) {
  auto x = scan_selective(layer.ssm, detail::conv_branch(layer.proj_in_x, layer.conv_x, u));
  auto z = detail::conv_branch(layer.proj_in_z, layer.conv_z, u);
  return concat_cols(x, z);
}

/// Unidirectional block: y = x_in + proj_out(core(norm(x_in))).
template <typename T>
BasicTensor<T> mamba_vision_block(const MambaVisionLayer<T>& layer, const BasicTensor<T>& x_in) {
  detail::require_tokens(layer, x_in);
  return add(x_in, layer.proj_out(mamba_core(layer, layer.norm(x_in))));
}

/// Bidirectional block: the core runs on the normalized sequence and on its
/// reversal (with shared weights); the re-reversed backward result is summed
/// with the forward one before the output projection.
template <typename T>
BasicTensor<T> mamba_vision_bi(const MambaVisionLayer<T>& layer, const BasicTensor<T>& x_in) {
  detail::require_tokens(layer, x_in);
  auto u = layer.norm(x_in);
  auto forward = mamba_core(layer, u);
  auto backward_scan = flip_rows(mamba_core(layer, flip_rows(u)));
  return add(x_in, layer.proj_out(add(forward, backward_scan)));
}

/// Row order of a height x width grid read column by column: entry k of the
/// result is the row-major index of the k-th cell in column-major order.
inline std::vector<std::ptrdiff_t> column_major_order(std::size_t height, std::size_t width) {
  std::vector<std::ptrdiff_t> order;
  order.reserve(height * width);
  for (std::size_t c = 0; c < width; ++c)
    for (std::size_t r = 0; r < height; ++r) order.push_back(static_cast<std::ptrdiff_t>(r * width + c));
  return order;
}

/// Inverse of column_major_order.
inline std::vector<std::ptrdiff_t> row_major_order_from_columns(std::size_t height, std::size_t width) {
  std::vector<std::ptrdiff_t> inverse(height * width);
  auto fwd = column_major_order(height, width);
  for (std::size_t k = 0; k < fwd.size(); ++k) inverse[static_cast<std::size_t>(fwd[k])] = static_cast<std::ptrdiff_t>(k);
  return inverse;
}

/// Applies the layer to a token grid stored row-major as [H*W, C], honouring
/// the layer's scan order and direction.
template <typename T>
BasicTensor<T> mamba_vision_grid(const MambaVisionLayer<T>& layer, const BasicTensor<T>& tokens, std::size_t height,
                                 std::size_t width) {
  if (tokens.rank() != 2 || tokens.dim(0) != height * width) {
    throw DimensionError("MambaVision: token count " + to_string(tokens.shape()) + " is not a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  auto apply = [&](const BasicTensor<T>& x) {
    return layer.direction == ScanDirection::Bi ? mamba_vision_bi(layer, x) : mamba_vision_block(layer, x);
  };
  if (layer.order == ScanOrder::RowMajor) return apply(tokens);
  auto transposed = gather_rows(tokens, column_major_order(height, width));
  return gather_rows(apply(transposed), row_major_order_from_columns(height, width));
}

/// Column-major variant on an [H, W, C] grid: transpose, scan row-major,
/// transpose back.
template <typename T>
BasicTensor<T> mamba_vision_s(const MambaVisionLayer<T>& layer, const BasicTensor<T>& grid) {
  if (grid.rank() != 3) throw DimensionError("mamba_vision_s: expected [H,W,C], got " + to_string(grid.shape()));
  const std::size_t h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
  auto tokens = gather_rows(reshape(grid, {h * w, c}), column_major_order(h, w));
  auto mixed = layer.direction == ScanDirection::Bi ? mamba_vision_bi(layer, tokens) : mamba_vision_block(layer, tokens);
  return reshape(gather_rows(mixed, row_major_order_from_columns(h, w)), {h, w, c});
}

}  // namespace vmatcher
