#pragma once

// Differentiable primitives over BasicTensor. Every function records a
// backward closure on the active tape when one of its inputs requires a
// gradient; without an active tape they are plain forward computations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "vmatcher/detail/gemm.hpp"
#include "vmatcher/tensor.hpp"

namespace vmatcher {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                      " vs " + to_string(b.shape()));
}

template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary(const char* op, const BasicTensor<T>& x, Fwd fwd, Deriv deriv) {
  BasicTensor<T> out(x.shape());
  auto y = out.mutable_data();
  auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) y[i] = fwd(xs[i]);
  if (needs_grad(x)) {
    record<T>(op, out, [xn = x.node(), yn = out.node().get(), deriv](const std::vector<T>& g) {
      T* gx = grad_of(xn);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xn->data[i], yn->data[i]);
    });
  }
  return out;
}

// Leading rows × trailing channel count for a [..., C] tensor.
template <typename T>
std::pair<std::size_t, std::size_t> rows_cols(const BasicTensor<T>& x) {
  require(x.rank() >= 1, "expected a tensor of rank >= 1");
  const std::size_t cols = x.shape().back();
  return {cols == 0 ? 0 : x.size() / cols, cols};
}

}  // namespace detail

// ---------------------------------------------------------------- layout ---

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(),
                  "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  BasicTensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (detail::needs_grad(x)) {
    detail::record<T>("reshape", out, [xn = x.node()](const std::vector<T>& g) {
      T* gx = detail::grad_of(xn);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// Matrix transpose of a rank-2 tensor.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  detail::require(x.rank() == 2, "transpose: expected rank 2, got " + to_string(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  BasicTensor<T> out({c, r});
  auto y = out.mutable_data();
  auto xs = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = xs[i * c + j];
  if (detail::needs_grad(x)) {
    detail::record<T>("transpose", out, [xn = x.node(), r, c](const std::vector<T>& g) {
      T* gx = detail::grad_of(xn);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

/// Selects rows along the leading axis. A negative index yields a zero row,
/// which is how border patches get their zero padding.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, const std::vector<std::ptrdiff_t>& index) {
  detail::require(x.rank() >= 1, "gather_rows: rank 0 input");
  const std::size_t n = x.dim(0);
  const std::size_t row = n == 0 ? 0 : x.size() / n;
  for (auto i : index) {
    if (i >= static_cast<std::ptrdiff_t>(n)) {
      throw DimensionError("gather_rows: index " + std::to_string(i) + " out of " + std::to_string(n));
    }
  }
  Shape shape = x.shape();
  shape[0] = index.size();
  BasicTensor<T> out(shape);
  auto y = out.mutable_data();
  auto xs = x.data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0) continue;
    std::copy_n(xs.begin() + static_cast<std::ptrdiff_t>(index[r] * row), row,
                y.begin() + static_cast<std::ptrdiff_t>(r * row));
  }
  if (detail::needs_grad(x)) {
    detail::record<T>("gather_rows", out, [xn = x.node(), index, row](const std::vector<T>& g) {
      T* gx = detail::grad_of(xn);
      for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] < 0) continue;
        const std::size_t base = static_cast<std::size_t>(index[r]) * row;
        for (std::size_t k = 0; k < row; ++k) gx[base + k] += g[r * row + k];
      }
    });
  }
  return out;
}

/// Reverses the order of rows along the leading axis.
template <typename T>
BasicTensor<T> flip_rows(const BasicTensor<T>& x) {
  std::vector<std::ptrdiff_t> index(x.dim(0));
  for (std::size_t i = 0; i < index.size(); ++i)
    index[i] = static_cast<std::ptrdiff_t>(index.size() - 1 - i);
  return gather_rows(x, index);
}

/// Picks individual elements by flat index into a rank-1 result.
template <typename T>
BasicTensor<T> gather(const BasicTensor<T>& x, const std::vector<std::size_t>& flat) {
  BasicTensor<T> out({flat.size()});
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i] >= x.size()) throw DimensionError("gather: flat index out of range");
    y[i] = x[flat[i]];
  }
  if (detail::needs_grad(x)) {
    detail::record<T>("gather", out, [xn = x.node(), flat](const std::vector<T>& g) {
      T* gx = detail::grad_of(xn);
      for (std::size_t i = 0; i < flat.size(); ++i) gx[flat[i]] += g[i];
    });
  }
  return out;
}

/// Concatenates [..., C1] and [..., C2] along the trailing axis.
template <typename T>
BasicTensor<T> concat_cols(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto [ra, ca] = detail::rows_cols(a);
  auto [rb, cb] = detail::rows_cols(b);
  detail::require(ra == rb && a.rank() == b.rank(), "concat_cols: leading extents differ " +
                                                       to_string(a.shape()) + " vs " +
                                                       to_string(b.shape()));
  Shape shape = a.shape();
  shape.back() = ca + cb;
  BasicTensor<T> out(shape);
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < ra; ++r) {
    std::copy_n(a.ptr() + r * ca, ca, y.data() + r * (ca + cb));
    std::copy_n(b.ptr() + r * cb, cb, y.data() + r * (ca + cb) + ca);
  }
  if (detail::needs_grad(a, b)) {
    detail::record<T>("concat_cols", out,
                      [an = a.node(), bn = b.node(), ra, ca, cb](const std::vector<T>& g) {
                        T* ga = detail::grad_of(an);
                        T* gb = detail::grad_of(bn);
                        for (std::size_t r = 0; r < ra; ++r) {
                          const T* src = g.data() + r * (ca + cb);
                          if (ga)
                            for (std::size_t k = 0; k < ca; ++k) ga[r * ca + k] += src[k];
                          if (gb)
                            for (std::size_t k = 0; k < cb; ++k) gb[r * cb + k] += src[ca + k];
                        }
                      });
  }
  return out;
}

/// Columns [begin, end) of a [..., C] tensor.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  auto [rows, cols] = detail::rows_cols(x);
  detail::require(begin <= end && end <= cols, "slice_cols: bad column range");
  const std::size_t w = end - begin;
  Shape shape = x.shape();
  shape.back() = w;
  BasicTensor<T> out(shape);
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.ptr() + r * cols + begin, w, y.data() + r * w);
  if (detail::needs_grad(x)) {
    detail::record<T>("slice_cols", out,
                      [xn = x.node(), rows, cols, begin, w](const std::vector<T>& g) {
                        T* gx = detail::grad_of(xn);
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t k = 0; k < w; ++k) gx[r * cols + begin + k] += g[r * w + k];
                      });
  }
  return out;
}

// ------------------------------------------------------------ elementwise ---

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  BasicTensor<T> out(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  if (detail::needs_grad(a, b)) {
    detail::record<T>("add", out, [an = a.node(), bn = b.node()](const std::vector<T>& g) {
      if (T* ga = detail::grad_of(an))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (T* gb = detail::grad_of(bn))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  BasicTensor<T> out(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  if (detail::needs_grad(a, b)) {
    detail::record<T>("sub", out, [an = a.node(), bn = b.node()](const std::vector<T>& g) {
      if (T* ga = detail::grad_of(an))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (T* gb = detail::grad_of(bn))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  BasicTensor<T> out(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  if (detail::needs_grad(a, b)) {
    detail::record<T>("mul", out, [an = a.node(), bn = b.node()](const std::vector<T>& g) {
      if (T* ga = detail::grad_of(an))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
      if (T* gb = detail::grad_of(bn))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  return detail::unary<T>("scale", x, [factor](T v) { return v * factor; },
                          [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return detail::unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                          [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                          [](T, T y) { return y * (T(1) - y); });
}

/// x * sigmoid(x).
template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  return detail::unary<T>(
      "silu", x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

/// log(1 + exp(x)), evaluated without overflow for large |x|.
template <typename T>
BasicTensor<T> softplus(const BasicTensor<T>& x) {
  return detail::unary<T>(
      "softplus", x,
      [](T v) { return v > T(20) ? v : (v < T(-20) ? std::exp(v) : std::log1p(std::exp(v))); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

/// Natural log with inputs clamped below at `floor`; the clamped region has
/// zero gradient.
template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x, T floor = T(1e-12)) {
  return detail::unary<T>(
      "log", x, [floor](T v) { return std::log(std::max(v, floor)); },
      [floor](T v, T) { return v > floor ? T(1) / v : T(0); });
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// ------------------------------------------------------------- reductions ---

/// Sum of all elements, accumulated in 64-bit.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
  if (detail::needs_grad(x)) {
    detail::record<T>("sum", out, [xn = x.node()](const std::vector<T>& g) {
      T* gx = detail::grad_of(xn);
      for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g[0];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.size() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// --------------------------------------------------------- linear algebra ---

/// [M,K] x [K,N] -> [M,N].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> out({m, n});
  detail::gemm<T>(false, false, m, n, k, a.ptr(), b.ptr(), T(0), out.mutable_data().data());
  if (detail::needs_grad(a, b)) {
    detail::record<T>("matmul", out, [an = a.node(), bn = b.node(), m, n, k](const std::vector<T>& g) {
      if (T* ga = detail::grad_of(an)) detail::gemm<T>(false, true, m, k, n, g.data(), bn->data.data(), T(1), ga);
      if (T* gb = detail::grad_of(bn)) detail::gemm<T>(true, false, k, n, m, an->data.data(), g.data(), T(1), gb);
    });
  }
  return out;
}

/// [M,K] x [N,K]^T -> [M,N].
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  BasicTensor<T> out({m, n});
  detail::gemm<T>(false, true, m, n, k, a.ptr(), b.ptr(), T(0), out.mutable_data().data());
  if (detail::needs_grad(a, b)) {
    detail::record<T>("matmul_nt", out, [an = a.node(), bn = b.node(), m, n, k](const std::vector<T>& g) {
      if (T* ga = detail::grad_of(an)) detail::gemm<T>(false, false, m, k, n, g.data(), bn->data.data(), T(1), ga);
      if (T* gb = detail::grad_of(bn)) detail::gemm<T>(true, false, n, k, m, g.data(), an->data.data(), T(1), gb);
    });
  }
  return out;
}

/// Batched [B,M,K] x [B,N,K]^T -> [B,M,N].
template <typename T>
BasicTensor<T> bmm_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
                  "bmm_nt: " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  BasicTensor<T> out({bs, m, n});
  T* y = out.mutable_data().data();
  for (std::size_t i = 0; i < bs; ++i)
    detail::gemm<T>(false, true, m, n, k, a.ptr() + i * m * k, b.ptr() + i * n * k, T(0), y + i * m * n);
  if (detail::needs_grad(a, b)) {
    detail::record<T>("bmm_nt", out, [an = a.node(), bn = b.node(), bs, m, n, k](const std::vector<T>& g) {
      T* ga = detail::grad_of(an);
      T* gb = detail::grad_of(bn);
      for (std::size_t i = 0; i < bs; ++i) {
        const T* gi = g.data() + i * m * n;
        if (ga) detail::gemm<T>(false, false, m, k, n, gi, bn->data.data() + i * n * k, T(1), ga + i * m * k);
        if (gb) detail::gemm<T>(true, false, n, k, m, gi, an->data.data() + i * m * k, T(1), gb + i * n * k);
      }
    });
  }
  return out;
}

/// y = x W + b over the trailing axis of x[..., Cin]; W is [Cin, Cout].
/// `bias` may be undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias = {}) {
  auto [rows, cin] = detail::rows_cols(x);
  detail::require(weight.rank() == 2 && weight.dim(0) == cin,
                  "linear: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  const std::size_t cout = weight.dim(1);
  if (bias.defined()) {
    detail::require(bias.rank() == 1 && bias.dim(0) == cout,
                    "linear: bias " + to_string(bias.shape()) + " vs " + std::to_string(cout) + " outputs");
  }
  Shape shape = x.shape();
  shape.back() = cout;
  BasicTensor<T> out(shape);
  T* y = out.mutable_data().data();
  detail::gemm<T>(false, false, rows, cout, cin, x.ptr(), weight.ptr(), T(0), y);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cout; ++c) y[r * cout + c] += bias[c];
  }
  const bool track = bias.defined() ? detail::needs_grad(x, weight, bias) : detail::needs_grad(x, weight);
  if (track) {
    detail::record<T>("linear", out,
                      [xn = x.node(), wn = weight.node(), bn = bias.node(), rows, cin, cout](const std::vector<T>& g) {
                        if (T* gx = detail::grad_of(xn))
                          detail::gemm<T>(false, true, rows, cin, cout, g.data(), wn->data.data(), T(1), gx);
                        if (T* gw = detail::grad_of(wn))
                          detail::gemm<T>(true, false, cin, cout, rows, xn->data.data(), g.data(), T(1), gw);
                        if (T* gb = detail::grad_of(bn))
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cout; ++c) gb[c] += g[r * cout + c];
                      });
  }
  return out;
}

// ----------------------------------------------------------- normalizing ---

/// Softmax along `axis` with max subtraction. NaN inputs propagate to NaN outputs.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "softmax: axis out of range for " + to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  BasicTensor<T> out(x.shape());
  T* y = out.mutable_data().data();
  const T* xs = x.ptr();
  // Reductions run over k with the inner axis contiguous, so strided axes
  // stream through memory row by row.
  std::vector<T> mx(inner);
  std::vector<double> total(inner);
  std::vector<char> nan(inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * n * inner;
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<T>::infinity());
    std::fill(total.begin(), total.end(), 0.0);
    std::fill(nan.begin(), nan.end(), 0);
    for (std::size_t k = 0; k < n; ++k) {
      const T* row = xs + base + k * inner;
      for (std::size_t in = 0; in < inner; ++in) {
        if (std::isnan(row[in])) nan[in] = 1;
        mx[in] = std::max(mx[in], row[in]);
      }
    }
    for (std::size_t k = 0; k < n; ++k) {
      const T* row = xs + base + k * inner;
      T* yr = y + base + k * inner;
      for (std::size_t in = 0; in < inner; ++in) {
        const T e = nan[in] ? std::numeric_limits<T>::quiet_NaN() : std::exp(row[in] - mx[in]);
        yr[in] = e;
        total[in] += static_cast<double>(e);
      }
    }
    for (std::size_t in = 0; in < inner; ++in) mx[in] = static_cast<T>(1.0 / total[in]);
    for (std::size_t k = 0; k < n; ++k) {
      T* yr = y + base + k * inner;
      for (std::size_t in = 0; in < inner; ++in) yr[in] *= mx[in];
    }
  }
  if (detail::needs_grad(x)) {
    detail::record<T>("softmax", out,
                      [xn = x.node(), yn = out.node().get(), outer, inner, n](const std::vector<T>& g) {
                        T* gx = detail::grad_of(xn);
                        const T* yv = yn->data.data();
                        std::vector<double> dot(inner);
                        for (std::size_t o = 0; o < outer; ++o) {
                          const std::size_t base = o * n * inner;
                          std::fill(dot.begin(), dot.end(), 0.0);
                          for (std::size_t k = 0; k < n; ++k)
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t i = base + k * inner + in;
                              dot[in] += static_cast<double>(g[i]) * yv[i];
                            }
                          for (std::size_t k = 0; k < n; ++k)
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t i = base + k * inner + in;
                              gx[i] += yv[i] * (g[i] - static_cast<T>(dot[in]));
                            }
                        }
                      });
  }
  return out;
}

/// Layer normalization over the trailing axis with affine gamma/beta.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-5)) {
  auto [rows, c] = detail::rows_cols(x);
  detail::require(gamma.size() == c && beta.size() == c, "layer_norm: affine size mismatch");
  BasicTensor<T> out(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  T* y = out.mutable_data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * c;
    double m = 0.0, v = 0.0;
    for (std::size_t k = 0; k < c; ++k) m += xr[k];
    m /= static_cast<double>(c);
    for (std::size_t k = 0; k < c; ++k) v += (xr[k] - m) * (xr[k] - m);
    v /= static_cast<double>(c);
    inv_std[r] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
    for (std::size_t k = 0; k < c; ++k) {
      xhat[r * c + k] = static_cast<T>(xr[k] - m) * inv_std[r];
      y[r * c + k] = xhat[r * c + k] * gamma[k] + beta[k];
    }
  }
  if (detail::needs_grad(x, gamma, beta)) {
    detail::record<T>("layer_norm", out,
                      [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat),
                       inv_std = std::move(inv_std), rows, c](const std::vector<T>& g) {
                        T* gx = detail::grad_of(xn);
                        T* gg = detail::grad_of(gn);
                        T* gb = detail::grad_of(bn);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const T* gr = g.data() + r * c;
                          const T* xh = xhat.data() + r * c;
                          if (gg)
                            for (std::size_t k = 0; k < c; ++k) gg[k] += gr[k] * xh[k];
                          if (gb)
                            for (std::size_t k = 0; k < c; ++k) gb[k] += gr[k];
                          if (gx) {
                            double s1 = 0.0, s2 = 0.0;
                            for (std::size_t k = 0; k < c; ++k) {
                              const double d = static_cast<double>(gr[k]) * gn->data[k];
                              s1 += d;
                              s2 += d * xh[k];
                            }
                            const double inv_c = 1.0 / static_cast<double>(c);
                            for (std::size_t k = 0; k < c; ++k) {
                              const double d = static_cast<double>(gr[k]) * gn->data[k];
                              gx[r * c + k] += static_cast<T>(inv_std[r] * (d - s1 * inv_c - xh[k] * s2 * inv_c));
                            }
                          }
                        }
                      });
  }
  return out;
}

// ------------------------------------------------------------ convolution ---

struct Conv2dGeometry {
  std::size_t cin, h, w, cout, kh, kw, stride, pad, hout, wout;
};

namespace detail {

template <typename T>
void im2col(const T* x, const Conv2dGeometry& g, T* col) {
  const std::size_t plane = g.hout * g.wout;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          T* row = dst + oy * g.wout;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(row, g.wout, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const Conv2dGeometry& g, T* gx) {
  const std::size_t plane = g.hout * g.wout;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = gx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[oy * g.wout + ox];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation of x[C,H,W] with kernel[Cout,C,kh,kw], zero padding.
/// `bias` may be undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernel, const BasicTensor<T>& bias = {},
                      std::size_t stride = 1, std::size_t pad = 0) {
  detail::require(x.rank() == 3 && kernel.rank() == 4 && kernel.dim(1) == x.dim(0),
                  "conv2d: input " + to_string(x.shape()) + " vs kernel " + to_string(kernel.shape()));
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), kernel.dim(0), kernel.dim(2), kernel.dim(3), stride, pad, 0, 0};
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                         to_string(x.shape()));
  }
  g.hout = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wout = (g.w + 2 * pad - g.kw) / stride + 1;
  if (bias.defined()) detail::require(bias.size() == g.cout, "conv2d: bias size mismatch");
  const std::size_t kdim = g.cin * g.kh * g.kw;
  const std::size_t plane = g.hout * g.wout;
  const bool direct = g.kh == 1 && g.kw == 1 && stride == 1 && pad == 0;
  std::vector<T> col;
  if (!direct) {
    col.resize(kdim * plane);
    detail::im2col(x.ptr(), g, col.data());
  }
  BasicTensor<T> out({g.cout, g.hout, g.wout});
  T* y = out.mutable_data().data();
  detail::gemm<T>(false, false, g.cout, plane, kdim, kernel.ptr(), direct ? x.ptr() : col.data(), T(0), y);
  if (bias.defined())
    for (std::size_t c = 0; c < g.cout; ++c)
      for (std::size_t p = 0; p < plane; ++p) y[c * plane + p] += bias[c];
  const bool track = bias.defined() ? detail::needs_grad(x, kernel, bias) : detail::needs_grad(x, kernel);
  if (track) {
    detail::record<T>("conv2d", out,
                      [xn = x.node(), kn = kernel.node(), bn = bias.node(), g, col = std::move(col), direct, kdim,
                       plane](const std::vector<T>& gy) {
                        const T* cols = direct ? xn->data.data() : col.data();
                        if (T* gk = detail::grad_of(kn))
                          detail::gemm<T>(false, true, g.cout, kdim, plane, gy.data(), cols, T(1), gk);
                        if (T* gb = detail::grad_of(bn))
                          for (std::size_t c = 0; c < g.cout; ++c) {
                            double acc = 0.0;
                            for (std::size_t p = 0; p < plane; ++p) acc += gy[c * plane + p];
                            gb[c] += static_cast<T>(acc);
                          }
                        if (T* gx = detail::grad_of(xn)) {
                          if (direct) {
                            detail::gemm<T>(true, false, kdim, plane, g.cout, kn->data.data(), gy.data(), T(1), gx);
                          } else {
                            std::vector<T> gcol(kdim * plane);
                            detail::gemm<T>(true, false, kdim, plane, g.cout, kn->data.data(), gy.data(), T(0),
                                            gcol.data());
                            detail::col2im(gcol.data(), g, gx);
                          }
                        }
                      });
  }
  return out;
}

/// Non-causal 1D cross-correlation of x[C,L] with kernel[Cout, C/groups, k],
/// symmetric zero padding `pad`. Output position t sees inputs t-pad .. t-pad+k-1.
template <typename T>
BasicTensor<T> conv1d(const BasicTensor<T>& x, const BasicTensor<T>& kernel, const BasicTensor<T>& bias = {},
                      std::size_t pad = 0, std::size_t groups = 1) {
  detail::require(x.rank() == 2 && kernel.rank() == 3, "conv1d: input " + to_string(x.shape()) +
                                                           " vs kernel " + to_string(kernel.shape()));
  const std::size_t cin = x.dim(0), len = x.dim(1), cout = kernel.dim(0), cpg = kernel.dim(1), k = kernel.dim(2);
  if (groups == 0 || cin % groups != 0 || cout % groups != 0 || cpg * groups != cin) {
    throw DimensionError("conv1d: channel/group mismatch for input " + to_string(x.shape()) + " kernel " +
                         to_string(kernel.shape()));
  }
  if (k > len + 2 * pad) throw DimensionError("conv1d: kernel larger than padded input");
  if (bias.defined()) detail::require(bias.size() == cout, "conv1d: bias size mismatch");
  const std::size_t lout = len + 2 * pad - k + 1;
  const std::size_t opg = cout / groups;
  BasicTensor<T> out({cout, lout});
  T* y = out.mutable_data().data();
  const T* xs = x.ptr();
  const T* ks = kernel.ptr();
  for (std::size_t o = 0; o < cout; ++o) {
    const std::size_t grp = o / opg;
    for (std::size_t t = 0; t < lout; ++t) {
      T acc = bias.defined() ? bias[o] : T(0);
      for (std::size_t ci = 0; ci < cpg; ++ci) {
        const T* xr = xs + (grp * cpg + ci) * len;
        const T* kr = ks + (o * cpg + ci) * k;
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad);
          if (s >= 0 && s < static_cast<std::ptrdiff_t>(len)) acc += kr[j] * xr[s];
        }
      }
      y[o * lout + t] = acc;
    }
  }
  const bool track = bias.defined() ? detail::needs_grad(x, kernel, bias) : detail::needs_grad(x, kernel);
  if (track) {
    detail::record<T>("conv1d", out,
                      [xn = x.node(), kn = kernel.node(), bn = bias.node(), len, lout, cout, cpg, k, pad, opg](
                          const std::vector<T>& g) {
                        T* gx = detail::grad_of(xn);
                        T* gk = detail::grad_of(kn);
                        T* gb = detail::grad_of(bn);
                        for (std::size_t o = 0; o < cout; ++o) {
                          const std::size_t grp = o / opg;
                          for (std::size_t t = 0; t < lout; ++t) {
                            const T go = g[o * lout + t];
                            if (gb) gb[o] += go;
                            for (std::size_t ci = 0; ci < cpg; ++ci) {
                              const std::size_t xrow = (grp * cpg + ci) * len;
                              const std::size_t krow = (o * cpg + ci) * k;
                              for (std::size_t j = 0; j < k; ++j) {
                                const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad);
                                if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) continue;
                                if (gk) gk[krow + j] += go * xn->data[xrow + static_cast<std::size_t>(s)];
                                if (gx) gx[xrow + static_cast<std::size_t>(s)] += go * kn->data[krow + j];
                              }
                            }
                          }
                        }
                      });
  }
  return out;
}

// ------------------------------------------------------------ batch norm ---

/// Inference-form batch normalization of x[C, ...] with frozen statistics.
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          const BasicTensor<T>& mean, const BasicTensor<T>& var, T eps) {
  detail::require(x.rank() >= 1, "batch_norm: rank 0 input");
  const std::size_t c = x.dim(0);
  detail::require(gamma.size() == c && beta.size() == c && mean.size() == c && var.size() == c,
                  "batch_norm: statistics do not match " + std::to_string(c) + " channels");
  for (T v : var.data())
    if (!(v >= T(0))) throw DomainError("batch_norm: negative or NaN variance");
  const std::size_t plane = x.size() / c;
  std::vector<T> mult(c), shift(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    mult[ch] = gamma[ch] / std::sqrt(var[ch] + eps);
    shift[ch] = beta[ch] - mean[ch] * mult[ch];
  }
  BasicTensor<T> out(x.shape());
  T* y = out.mutable_data().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < plane; ++p) y[ch * plane + p] = x[ch * plane + p] * mult[ch] + shift[ch];
  if (detail::needs_grad(x, gamma, beta)) {
    detail::record<T>("batch_norm", out,
                      [xn = x.node(), gn = gamma.node(), bn = beta.node(), mean = mean.node(), var = var.node(),
                       eps, c, plane](const std::vector<T>& g) {
                        T* gx = detail::grad_of(xn);
                        T* gg = detail::grad_of(gn);
                        T* gb = detail::grad_of(bn);
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          const T inv = T(1) / std::sqrt(var->data[ch] + eps);
                          double sg = 0.0, sgx = 0.0;
                          for (std::size_t p = 0; p < plane; ++p) {
                            const T gv = g[ch * plane + p];
                            sg += gv;
                            sgx += gv * (xn->data[ch * plane + p] - mean->data[ch]) * inv;
                            if (gx) gx[ch * plane + p] += gv * gn->data[ch] * inv;
                          }
                          if (gg) gg[ch] += static_cast<T>(sgx);
                          if (gb) gb[ch] += static_cast<T>(sg);
                        }
                      });
  }
  return out;
}

template <typename T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> var;  // biased (population) variance
};

/// Training-form batch normalization: normalizes x[C, ...] with its own
/// per-channel statistics, which are returned through `stats`.
template <typename T>
BasicTensor<T> batch_norm_train(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                T eps, BatchStats<T>* stats = nullptr) {
  detail::require(x.rank() >= 1, "batch_norm_train: rank 0 input");
  const std::size_t c = x.dim(0);
  detail::require(gamma.size() == c && beta.size() == c, "batch_norm_train: affine size mismatch");
  const std::size_t plane = x.size() / c;
  std::vector<T> xhat(x.size()), inv_std(c), means(c), vars(c);
  BasicTensor<T> out(x.shape());
  T* y = out.mutable_data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* xr = x.ptr() + ch * plane;
    double m = 0.0, v = 0.0;
    for (std::size_t p = 0; p < plane; ++p) m += xr[p];
    m /= static_cast<double>(plane);
    for (std::size_t p = 0; p < plane; ++p) v += (xr[p] - m) * (xr[p] - m);
    v /= static_cast<double>(plane);
    means[ch] = static_cast<T>(m);
    vars[ch] = static_cast<T>(v);
    inv_std[ch] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
    for (std::size_t p = 0; p < plane; ++p) {
      xhat[ch * plane + p] = static_cast<T>(xr[p] - m) * inv_std[ch];
      y[ch * plane + p] = xhat[ch * plane + p] * gamma[ch] + beta[ch];
    }
  }
  if (stats) *stats = BatchStats<T>{means, vars};
  if (detail::needs_grad(x, gamma, beta)) {
    detail::record<T>("batch_norm_train", out,
                      [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat),
                       inv_std = std::move(inv_std), c, plane](const std::vector<T>& g) {
                        T* gx = detail::grad_of(xn);
                        T* gg = detail::grad_of(gn);
                        T* gb = detail::grad_of(bn);
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          const T* gr = g.data() + ch * plane;
                          const T* xh = xhat.data() + ch * plane;
                          double s1 = 0.0, s2 = 0.0;
                          for (std::size_t p = 0; p < plane; ++p) {
                            s1 += gr[p];
                            s2 += static_cast<double>(gr[p]) * xh[p];
                          }
                          if (gg) gg[ch] += static_cast<T>(s2);
                          if (gb) gb[ch] += static_cast<T>(s1);
                          if (gx) {
                            const double inv_n = 1.0 / static_cast<double>(plane);
                            const double k = static_cast<double>(gn->data[ch]) * inv_std[ch];
                            for (std::size_t p = 0; p < plane; ++p)
                              gx[ch * plane + p] += static_cast<T>(k * (gr[p] - s1 * inv_n - xh[p] * s2 * inv_n));
                          }
                        }
                      });
  }
  return out;
}

// -------------------------------------------------------------- resizing ---

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

/// Half-pixel-centre (align_corners = false) source taps for one axis.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = i0 + (i0 < in - 1 ? 1 : 0);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resampling of x[C,H,W] to [C,H',W'] with the align_corners=false
/// convention: output pixel centres map onto input pixel centres, and source
/// coordinates are clamped at the borders.
template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require(x.rank() == 3, "bilinear_resize: expected [C,H,W], got " + to_string(x.shape()));
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_resize: target extent must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) {
    return reshape(x, x.shape());
  }
  auto ty = detail::lerp_taps(h, out_h);
  auto tx = detail::lerp_taps(w, out_w);
  BasicTensor<T> out({c, out_h, out_w});
  T* y = out.mutable_data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = x.ptr() + ch * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const double top = src[a.i0 * w + b.i0] * (1.0 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const double bot = src[a.i1 * w + b.i0] * (1.0 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        y[(ch * out_h + oy) * out_w + ox] = static_cast<T>(top * (1.0 - a.w1) + bot * a.w1);
      }
    }
  }
  if (detail::needs_grad(x)) {
    detail::record<T>("bilinear_resize", out,
                      [xn = x.node(), ty = std::move(ty), tx = std::move(tx), c, h, w, out_h, out_w](
                          const std::vector<T>& g) {
                        T* gx = detail::grad_of(xn);
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          T* dst = gx + ch * h * w;
                          for (std::size_t oy = 0; oy < out_h; ++oy) {
                            const auto& a = ty[oy];
                            for (std::size_t ox = 0; ox < out_w; ++ox) {
                              const auto& b = tx[ox];
                              const double gv = g[(ch * out_h + oy) * out_w + ox];
                              dst[a.i0 * w + b.i0] += static_cast<T>(gv * (1.0 - a.w1) * (1.0 - b.w1));
                              dst[a.i0 * w + b.i1] += static_cast<T>(gv * (1.0 - a.w1) * b.w1);
                              dst[a.i1 * w + b.i0] += static_cast<T>(gv * a.w1 * (1.0 - b.w1));
                              dst[a.i1 * w + b.i1] += static_cast<T>(gv * a.w1 * b.w1);
                            }
                          }
                        }
                      });
  }
  return out;
}

}  // namespace vmatcher
