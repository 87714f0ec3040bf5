#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vmatcher/layers.hpp"

namespace vmatcher {

struct GridPos {
  double row = 0.0;
  double col = 0.0;
};

/// Row-major (row, col) positions of an h x w grid.
inline std::vector<GridPos> grid_positions(std::size_t height, std::size_t width) {
  std::vector<GridPos> pos;
  pos.reserve(height * width);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) pos.push_back({static_cast<double>(r), static_cast<double>(c)});
  return pos;
}

namespace detail {

// Rotates channel pairs of x[L,D] in place-free fashion; sign = -1 applies the
// inverse rotation (used by the backward pass).
template <typename T>
void rope_rotate(const T* x, T* y, std::size_t len, std::size_t dim, const std::vector<GridPos>& pos, double sign,
                 bool accumulate) {
  const std::size_t half = dim / 2;
  const std::size_t pairs = half / 2;
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const double p = axis == 0 ? pos[t].row : pos[t].col;
      for (std::size_t i = 0; i < pairs; ++i) {
        const double theta = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
        const double ang = sign * p * theta;
        const double cs = std::cos(ang), sn = std::sin(ang);
        const std::size_t k = t * dim + axis * half + 2 * i;
        const double a = x[k], b = x[k + 1];
        const T ya = static_cast<T>(a * cs - b * sn);
        const T yb = static_cast<T>(a * sn + b * cs);
        if (accumulate) {
          y[k] += ya;
          y[k + 1] += yb;
        } else {
          y[k] = ya;
          y[k + 1] = yb;
        }
      }
    }
  }
}

}  // namespace detail

/// 2D rotary position encoding of x[L, D]: the first D/2 channels rotate by
/// row-position angles, the last D/2 by column-position angles; pair i in a
/// half turns by p * 10000^(-2i/(D/2)).
template <typename T>
BasicTensor<T> rope_encode(const BasicTensor<T>& x, const std::vector<GridPos>& positions) {
  detail::require(x.rank() == 2 && positions.size() == x.dim(0),
                  "rope_encode: need one position per row of " + to_string(x.shape()));
  const std::size_t len = x.dim(0), dim = x.dim(1);
  if (dim % 4 != 0) throw ConfigError("rope_encode: channel count must be divisible by 4, got " + std::to_string(dim));
  BasicTensor<T> out(x.shape());
  detail::rope_rotate(x.ptr(), out.mutable_data().data(), len, dim, positions, 1.0, false);
  if (detail::needs_grad(x)) {
    detail::record<T>("rope_encode", out, [xn = x.node(), positions, len, dim](const std::vector<T>& g) {
      detail::rope_rotate(g.data(), detail::grad_of(xn), len, dim, positions, -1.0, true);
    });
  }
  return out;
}

/// Multi-head scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V per
/// head, heads concatenated. d_k is the per-head width.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::size_t heads = 1) {
  detail::require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2 && k.dim(0) == v.dim(0) &&
                      q.dim(1) == k.dim(1) && k.dim(1) == v.dim(1),
                  "attention: Q " + to_string(q.shape()) + " K " + to_string(k.shape()) + " V " + to_string(v.shape()));
  const std::size_t c = q.dim(1);
  if (heads == 0 || c % heads != 0) throw ConfigError("attention: channels not divisible by head count");
  const std::size_t dh = c / heads;
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  BasicTensor<T> result;
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    auto kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    auto vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    auto weights = softmax(scale(matmul_nt(qh, kh), inv), 1);
    auto head = matmul(weights, vh);
    result = result.defined() ? concat_cols(result, head) : head;
  }
  return result;
}

enum class AttentionMode { Self, Cross };

template <typename T>
struct DsAttentionLayer {
  Linear<T> wq;
  Linear<T> wk;
  Linear<T> wv;
  std::size_t heads = 1;
  std::size_t ds_factor = 4;
  AttentionMode mode = AttentionMode::Self;
  bool use_rope = true;

  static DsAttentionLayer init(std::size_t channels, std::size_t heads, std::size_t ds_factor, AttentionMode mode,
                               bool use_rope, Rng& rng) {
    if (heads == 0 || channels % heads != 0) throw ConfigError("attention: channels not divisible by heads");
    if ((channels / heads) % 4 != 0) throw ConfigError("attention: head width must be divisible by 4 for 2D RoPE");
    if (ds_factor == 0) throw ConfigError("attention: downsample factor must be >= 1");
    DsAttentionLayer l;
    l.wq = Linear<T>::init(channels, channels, rng);
    l.wk = Linear<T>::init(channels, channels, rng);
    l.wv = Linear<T>::init(channels, channels, rng);
    l.heads = heads;
    l.ds_factor = ds_factor;
    l.mode = mode;
    l.use_rope = use_rope;
    return l;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    wq.visit(prefix + "wq.", f);
    wk.visit(prefix + "wk.", f);
    wv.visit(prefix + "wv.", f);
  }
};

namespace detail {

// [H,W,C] -> [C,H,W] and back.
template <typename T>
BasicTensor<T> hwc_to_chw(const BasicTensor<T>& x) {
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  return reshape(transpose(reshape(x, {h * w, c})), {c, h, w});
}

template <typename T>
BasicTensor<T> chw_to_hwc(const BasicTensor<T>& x) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  return reshape(transpose(reshape(x, {c, h * w})), {h, w, c});
}

inline std::size_t downsampled(std::size_t extent, std::size_t factor) { return std::max<std::size_t>(1, extent / factor); }

}  // namespace detail

/// Downsampled attention of grid xa[H,W,C] over grid xb[H',W',C].
///
/// Both grids are bilinearly shrunk by ds_factor (extents clamp at 1),
/// queries come from xa and keys/values from xb, RoPE is applied in self mode,
/// and the result is resized back to H x W and added to xa. There is no
/// post-attention MLP.
template <typename T>
BasicTensor<T> ds_attention(const DsAttentionLayer<T>& layer, const BasicTensor<T>& xa, const BasicTensor<T>& xb) {
  detail::require(xa.rank() == 3 && xb.rank() == 3 && xa.dim(2) == xb.dim(2),
                  "ds_attention: expected [H,W,C] grids, got " + to_string(xa.shape()) + " and " + to_string(xb.shape()));
  if (layer.mode == AttentionMode::Self && !xa.same_node(xb)) {
    throw ContractError("ds_attention: self-attention requires xb to be xa");
  }
  const std::size_t h = xa.dim(0), w = xa.dim(1), c = xa.dim(2);
  const std::size_t ha = detail::downsampled(h, layer.ds_factor), wa = detail::downsampled(w, layer.ds_factor);
  const std::size_t hb = detail::downsampled(xb.dim(0), layer.ds_factor);
  const std::size_t wb = detail::downsampled(xb.dim(1), layer.ds_factor);

  auto small_a = reshape(detail::chw_to_hwc(bilinear_resize(detail::hwc_to_chw(xa), ha, wa)), {ha * wa, c});
  auto small_b = xa.same_node(xb)
                     ? small_a
                     : reshape(detail::chw_to_hwc(bilinear_resize(detail::hwc_to_chw(xb), hb, wb)), {hb * wb, c});
  auto q = layer.wq(small_a);
  auto k = layer.wk(small_b);
  auto v = layer.wv(small_b);
  if (layer.mode == AttentionMode::Self && layer.use_rope) {
    const auto pos = grid_positions(ha, wa);
    const std::size_t dh = c / layer.heads;
    if (layer.heads == 1) {
      q = rope_encode(q, pos);
      k = rope_encode(k, pos);
    } else {
      BasicTensor<T> qr, kr;
      for (std::size_t hd = 0; hd < layer.heads; ++hd) {
        auto qh = rope_encode(slice_cols(q, hd * dh, (hd + 1) * dh), pos);
        auto kh = rope_encode(slice_cols(k, hd * dh, (hd + 1) * dh), pos);
        qr = qr.defined() ? concat_cols(qr, qh) : qh;
        kr = kr.defined() ? concat_cols(kr, kh) : kh;
      }
      q = qr;
      k = kr;
    }
  }
  auto att = reshape(attention(q, k, v, layer.heads), {ha, wa, c});
  auto up = detail::chw_to_hwc(bilinear_resize(detail::hwc_to_chw(att), h, w));
  return add(xa, up);
}

template <typename T>
struct GatedMlpLayer {
  LayerNorm<T> norm;
  Linear<T> gate;  // C -> Ce
  Linear<T> value;  // C -> Ce
  Linear<T> out;   // Ce -> C

  static GatedMlpLayer init(std::size_t channels, std::size_t expansion, Rng& rng) {
    GatedMlpLayer l;
    l.norm = LayerNorm<T>::init(channels);
    l.gate = Linear<T>::init(channels, expansion, rng);
    l.value = Linear<T>::init(channels, expansion, rng);
    l.out = Linear<T>::init(expansion, channels, rng);
    return l;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + "norm.", f);
    gate.visit(prefix + "gate.", f);
    value.visit(prefix + "value.", f);
    out.visit(prefix + "out.", f);
  }
};

/// y = x + W_out(SiLU(norm(x) W_gate) * (norm(x) W_val)) over the trailing axis.
template <typename T>
BasicTensor<T> gmlp(const GatedMlpLayer<T>& layer, const BasicTensor<T>& x) {
  auto u = layer.norm(x);
  return add(x, layer.out(mul(silu(layer.gate(u)), layer.value(u))));
}

}  // namespace vmatcher
