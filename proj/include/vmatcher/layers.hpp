#pragma once

// Parameter holders shared by the model components. Every holder exposes
// visit(prefix, f) which calls f(name, tensor, trainable) for each array it
// owns; the parameter registry, the optimizer and the weight archive are all
// built on top of that.

#include <cmath>
#include <string>

#include "vmatcher/ops.hpp"
#include "vmatcher/random.hpp"

namespace vmatcher {

template <typename T>
struct Linear {
  BasicTensor<T> weight;  // [in, out]
  BasicTensor<T> bias;    // [out]

  /// U(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l{uniform_tensor<T>({in, out}, -bound, bound, rng), BasicTensor<T>({out})};
    l.weight.set_requires_grad(true);
    l.bias.set_requires_grad(true);
    return l;
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return linear(x, weight, bias); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight, true);
    f(prefix + "bias", bias, true);
  }
};

template <typename T>
struct LayerNorm {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;

  static LayerNorm init(std::size_t channels) {
    LayerNorm n{BasicTensor<T>::full({channels}, T(1)), BasicTensor<T>({channels})};
    n.gamma.set_requires_grad(true);
    n.beta.set_requires_grad(true);
    return n;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return layer_norm(x, gamma, beta); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "gamma", gamma, true);
    f(prefix + "beta", beta, true);
  }
};

/// Depthwise, length-preserving 1D convolution over a [C, L] sequence.
template <typename T>
struct DepthwiseConv1d {
  BasicTensor<T> weight;  // [C, 1, k]
  BasicTensor<T> bias;    // [C]

  static DepthwiseConv1d init(std::size_t channels, std::size_t kernel, Rng& rng) {
    if (kernel % 2 == 0) throw ConfigError("DepthwiseConv1d: kernel size must be odd to preserve length");
    const double bound = 1.0 / std::sqrt(static_cast<double>(kernel));
    DepthwiseConv1d c{uniform_tensor<T>({channels, 1, kernel}, -bound, bound, rng), BasicTensor<T>({channels})};
    c.weight.set_requires_grad(true);
    c.bias.set_requires_grad(true);
    return c;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return conv1d(x, weight, bias, weight.dim(2) / 2, weight.dim(0));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight, true);
    f(prefix + "bias", bias, true);
  }
};

template <typename T>
struct Conv2d {
  BasicTensor<T> weight;  // [out, in, k, k]
  BasicTensor<T> bias;    // [out], undefined when the conv feeds a batch norm
  std::size_t stride = 1;
  std::size_t pad = 0;

  /// Kaiming-normal weights, std = sqrt(2 / fan_in).
  static Conv2d init(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, bool with_bias,
                     Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * kernel * kernel));
    Conv2d c;
    c.weight = normal_tensor<T>({out, in, kernel, kernel}, stddev, rng);
    c.weight.set_requires_grad(true);
    if (with_bias) {
      c.bias = BasicTensor<T>({out});
      c.bias.set_requires_grad(true);
    }
    c.stride = stride;
    c.pad = kernel / 2;
    return c;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight, true);
    if (bias.defined()) f(prefix + "bias", bias, true);
  }
};

template <typename T>
struct BatchNorm2d {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);
  bool training = true;

  static BatchNorm2d init(std::size_t channels) {
    BatchNorm2d bn;
    bn.gamma = BasicTensor<T>::full({channels}, T(1));
    bn.beta = BasicTensor<T>({channels});
    bn.running_mean = BasicTensor<T>({channels});
    bn.running_var = BasicTensor<T>::full({channels}, T(1));
    bn.gamma.set_requires_grad(true);
    bn.beta.set_requires_grad(true);
    return bn;
  }

  /// Training mode normalizes with batch statistics and folds them into the
  /// running estimates; inference mode uses the running estimates.
  BasicTensor<T> operator()(const BasicTensor<T>& x) {
    if (!training) return batch_norm(x, gamma, beta, running_mean, running_var, eps);
    BatchStats<T> stats;
    auto y = batch_norm_train(x, gamma, beta, eps, &stats);
    const double n = static_cast<double>(x.size() / x.dim(0));
    const double unbias = n > 1 ? n / (n - 1) : 1.0;
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (T(1) - momentum) * rm[c] + momentum * stats.mean[c];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * static_cast<T>(stats.var[c] * unbias);
    }
    return y;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "gamma", gamma, true);
    f(prefix + "beta", beta, true);
    f(prefix + "running_mean", running_mean, false);
    f(prefix + "running_var", running_var, false);
  }
};

}  // namespace vmatcher
