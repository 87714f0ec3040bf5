#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vmatcher/layers.hpp"

namespace vmatcher {

struct BackboneConfig {
  std::array<std::size_t, 3> channels{32, 64, 128};
  std::size_t blocks_per_group = 3;
};

template <typename T>
struct FeatureMaps {
  BasicTensor<T> f2;  // [C1, H/2, W/2]
  BasicTensor<T> f4;  // [C2, H/4, W/4]
  BasicTensor<T> f8;  // [C3, H/8, W/8]
};

/// Folds frozen batch-norm statistics into the preceding convolution:
///   W' = W * gamma / sqrt(var + eps),  b' = (b - mean) * gamma / sqrt(var + eps) + beta.
template <typename T>
Conv2d<T> fuse_conv_bn(const Conv2d<T>& conv, const BatchNorm2d<T>& bn) {
  if (bn.training) throw ContractError("fuse_conv_bn: batch norm must be in inference mode");
  const std::size_t cout = conv.weight.dim(0);
  if (bn.gamma.size() != cout) throw DimensionError("fuse_conv_bn: channel mismatch");
  const std::size_t per_out = conv.weight.size() / cout;
  Conv2d<T> fused;
  fused.stride = conv.stride;
  fused.pad = conv.pad;
  fused.weight = BasicTensor<T>(conv.weight.shape());
  fused.bias = BasicTensor<T>({cout});
  auto w = fused.weight.mutable_data();
  auto b = fused.bias.mutable_data();
  for (std::size_t o = 0; o < cout; ++o) {
    if (!(bn.running_var[o] >= T(0))) throw DomainError("fuse_conv_bn: negative variance");
    const T k = bn.gamma[o] / std::sqrt(bn.running_var[o] + bn.eps);
    for (std::size_t i = 0; i < per_out; ++i) w[o * per_out + i] = conv.weight[o * per_out + i] * k;
    const T b0 = conv.bias.defined() ? conv.bias[o] : T(0);
    b[o] = (b0 - bn.running_mean[o]) * k + bn.beta[o];
  }
  return fused;
}

template <typename T>
struct ConvBnBlock {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;
};

/// VGG-style extractor: three groups of three Conv3x3-BN-ReLU blocks, the
/// first block of each group with stride 2. Group outputs are the 1/2, 1/4
/// and 1/8 resolution maps.
template <typename T>
class Backbone {
 public:
  static Backbone init(const BackboneConfig& cfg, Rng& rng) {
    if (cfg.blocks_per_group != 3) throw ConfigError("backbone: exactly three blocks per group are supported");
    Backbone b;
    b.config_ = cfg;
    std::size_t in = 1;
    for (std::size_t g = 0; g < 3; ++g) {
      for (std::size_t k = 0; k < cfg.blocks_per_group; ++k) {
        const std::size_t out = cfg.channels[g];
        b.blocks_.push_back({Conv2d<T>::init(in, out, 3, k == 0 ? 2 : 1, false, rng), BatchNorm2d<T>::init(out)});
        in = out;
      }
    }
    return b;
  }

  const BackboneConfig& config() const { return config_; }

  void set_training(bool training) {
    for (auto& blk : blocks_) blk.bn.training = training;
    if (training) fused_.clear();
  }

  bool training() const { return !blocks_.empty() && blocks_.front().bn.training; }
  bool fused() const { return !fused_.empty(); }

  /// Replaces every Conv-BN pair by its folded convolution for inference.
  void fuse() {
    fused_.clear();
    for (const auto& blk : blocks_) fused_.push_back(fuse_conv_bn(blk.conv, blk.bn));
  }

  void unfuse() { fused_.clear(); }

  /// image: [1, H, W] grayscale with H, W multiples of 8.
  FeatureMaps<T> extract(const BasicTensor<T>& image) {
    if (image.rank() != 3 || image.dim(0) != 1) {
      throw DimensionError("backbone: expected a [1,H,W] grayscale image, got " + to_string(image.shape()));
    }
    if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0 || image.dim(1) == 0 || image.dim(2) == 0) {
      throw ContractError("backbone: image extents " + to_string(image.shape()) +
                          " must be non-zero multiples of 8 (pad before extraction)");
    }
    FeatureMaps<T> maps;
    auto x = image;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      x = fused_.empty() ? relu(blocks_[i].bn(blocks_[i].conv(x))) : relu(fused_[i](x));
      if (i == 2) maps.f2 = x;
      if (i == 5) maps.f4 = x;
      if (i == 8) maps.f8 = x;
    }
    return maps;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = prefix + "g" + std::to_string(i / 3) + ".b" + std::to_string(i % 3) + ".";
      blocks_[i].conv.visit(p + "conv.", f);
      blocks_[i].bn.visit(p + "bn.", f);
    }
  }

  std::vector<ConvBnBlock<T>>& blocks() { return blocks_; }

 private:
  BackboneConfig config_;
  std::vector<ConvBnBlock<T>> blocks_;
  std::vector<Conv2d<T>> fused_;
};

/// Trainable parameter count of the backbone: 3x3 kernels plus BN affine terms.
inline std::size_t backbone_parameter_count(const BackboneConfig& cfg) {
  std::size_t total = 0, in = 1;
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t k = 0; k < cfg.blocks_per_group; ++k) {
      total += cfg.channels[g] * in * 9 + 2 * cfg.channels[g];
      in = cfg.channels[g];
    }
  return total;
}

}  // namespace vmatcher
