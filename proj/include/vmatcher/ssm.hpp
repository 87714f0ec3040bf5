#pragma once

// State-space machinery: zero-order-hold discretization, the recurrent and
// convolutional forms of a linear time-invariant scan, and the input-dependent
// (selective) scan used inside the MambaVision mixer.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "vmatcher/ops.hpp"
#include "vmatcher/random.hpp"

namespace vmatcher {

template <typename T>
struct ZohCoefficients {
  T a_bar;
  T b_bar;
};

/// Exact zero-order hold for one diagonal entry:
///   a_bar = exp(delta*a),  b_bar = (delta*a)^-1 (exp(delta*a) - 1) * delta*b.
/// For |delta*a| < 1e-6 the series limit delta*b*(1 + delta*a/2) is used.
template <typename T>
ZohCoefficients<T> zoh_discretize(T delta, T a, T b) {
  if (!(delta > T(0))) throw DomainError("zoh_discretize: step size must be positive");
  const T da = delta * a;
  const T a_bar = std::exp(da);
  T b_bar;
  if (std::abs(da) < T(1e-6)) {
    b_bar = delta * b * (T(1) + da / T(2));
  } else {
    b_bar = std::expm1(da) / da * delta * b;
  }
  return {a_bar, b_bar};
}

/// Discrete diagonal SSM for a single input channel with `state` latent
/// dimensions over `length` steps. Coefficients are stored per step
/// ([length, state], row-major) so time-varying systems fit the same type.
template <typename T>
struct DiscreteSsm {
  std::size_t length = 0;
  std::size_t state = 0;
  std::vector<T> a_bar;
  std::vector<T> b_bar;
  std::vector<T> c;

  /// Time-invariant system: the same coefficients repeated at every step.
  static DiscreteSsm lti(std::span<const T> a, std::span<const T> b, std::span<const T> c, std::size_t length) {
    if (a.size() != b.size() || a.size() != c.size()) throw DimensionError("DiscreteSsm: coefficient sizes differ");
    DiscreteSsm s;
    s.length = length;
    s.state = a.size();
    for (std::size_t t = 0; t < length; ++t) {
      s.a_bar.insert(s.a_bar.end(), a.begin(), a.end());
      s.b_bar.insert(s.b_bar.end(), b.begin(), b.end());
      s.c.insert(s.c.end(), c.begin(), c.end());
    }
    return s;
  }

  bool time_invariant() const {
    for (std::size_t t = 1; t < length; ++t)
      for (std::size_t n = 0; n < state; ++n) {
        const std::size_t i = t * state + n;
        if (a_bar[i] != a_bar[n] || b_bar[i] != b_bar[n] || c[i] != c[n]) return false;
      }
    return true;
  }
};

/// h_t = a_bar_t * h_{t-1} + b_bar_t * x_t,  y_t = <c_t, h_t>,  h_{-1} = 0.
template <typename T>
std::vector<T> scan_recurrent(const DiscreteSsm<T>& ssm, std::span<const std::type_identity_t<T>> x) {
  if (x.size() != ssm.length) throw DimensionError("scan_recurrent: input length differs from system length");
  std::vector<T> h(ssm.state, T(0));
  std::vector<T> y(ssm.length);
  for (std::size_t t = 0; t < ssm.length; ++t) {
    T acc = T(0);
    for (std::size_t n = 0; n < ssm.state; ++n) {
      const std::size_t i = t * ssm.state + n;
      h[n] = ssm.a_bar[i] * h[n] + ssm.b_bar[i] * x[t];
      acc += ssm.c[i] * h[n];
    }
    y[t] = acc;
  }
  return y;
}

/// Convolution kernel K[k] = <c, a_bar^k * b_bar> of an LTI system.
template <typename T>
std::vector<T> ssm_kernel(const DiscreteSsm<T>& ssm, std::size_t length) {
  if (!ssm.time_invariant()) {
    throw ContractError("ssm_kernel: time-varying coefficients have no convolution kernel; use the selective scan");
  }
  std::vector<T> kernel(length, T(0));
  std::vector<T> power(ssm.b_bar.begin(), ssm.b_bar.begin() + static_cast<std::ptrdiff_t>(ssm.state));
  for (std::size_t k = 0; k < length; ++k) {
    T acc = T(0);
    for (std::size_t n = 0; n < ssm.state; ++n) {
      acc += ssm.c[n] * power[n];
      power[n] *= ssm.a_bar[n];
    }
    kernel[k] = acc;
  }
  return kernel;
}

/// y_t = sum_{k<=t} K[k] x_{t-k}.
template <typename T>
std::vector<T> causal_convolve(std::span<const std::type_identity_t<T>> x, std::span<const std::type_identity_t<T>> kernel) {
  std::vector<T> y(x.size(), T(0));
  for (std::size_t t = 0; t < x.size(); ++t) {
    T acc = T(0);
    for (std::size_t k = 0; k <= t && k < kernel.size(); ++k) acc += kernel[k] * x[t - k];
    y[t] = acc;
  }
  return y;
}

/// Fused selective scan over u[L,D]:
///   h_t[d,n] = exp(delta[t,d] * A[d,n]) h_{t-1}[d,n] + delta[t,d] * B[t,n] * u[t,d]
///   y[t,d]   = sum_n C[t,n] h_t[d,n]
/// The input coefficient uses the Euler form delta*B; the state transition
/// uses the exact exponential.
template <typename T>
BasicTensor<T> selective_scan(const BasicTensor<T>& u, const BasicTensor<T>& delta, const BasicTensor<T>& a,
                              const BasicTensor<T>& b, const BasicTensor<T>& c) {
  detail::require(u.rank() == 2 && delta.shape() == u.shape(), "selective_scan: u/delta shapes");
  const std::size_t len = u.dim(0), d = u.dim(1);
  detail::require(a.rank() == 2 && a.dim(0) == d, "selective_scan: A must be [D,N]");
  const std::size_t n = a.dim(1);
  detail::require(b.rank() == 2 && b.dim(0) == len && b.dim(1) == n, "selective_scan: B must be [L,N]");
  detail::require(c.shape() == b.shape(), "selective_scan: C must be [L,N]");

  const bool track = detail::needs_grad(u, delta, a, b, c);
  std::vector<T> states;  // h_t for every step, kept for the backward pass
  if (track) states.resize(len * d * n);
  std::vector<T> h(d * n, T(0));
  BasicTensor<T> out({len, d});
  T* y = out.mutable_data().data();
  const T* us = u.ptr();
  const T* ds = delta.ptr();
  const T* as = a.ptr();
  const T* bs = b.ptr();
  const T* cs = c.ptr();
  for (std::size_t t = 0; t < len; ++t) {
    const T* bt = bs + t * n;
    const T* ct = cs + t * n;
    for (std::size_t ch = 0; ch < d; ++ch) {
      const T dt = ds[t * d + ch];
      const T du = dt * us[t * d + ch];
      T* hc = h.data() + ch * n;
      const T* ac = as + ch * n;
      T acc = T(0);
      for (std::size_t k = 0; k < n; ++k) {
        hc[k] = std::exp(dt * ac[k]) * hc[k] + du * bt[k];
        acc += ct[k] * hc[k];
      }
      y[t * d + ch] = acc;
    }
    if (track) std::copy(h.begin(), h.end(), states.begin() + static_cast<std::ptrdiff_t>(t * d * n));
  }
  if (track) {
    detail::record<T>(
        "selective_scan", out,
        [un = u.node(), dn = delta.node(), an = a.node(), bn = b.node(), cn = c.node(), states = std::move(states),
         len, d, n](const std::vector<T>& g) {
          T* gu = detail::grad_of(un);
          T* gd = detail::grad_of(dn);
          T* ga = detail::grad_of(an);
          T* gb = detail::grad_of(bn);
          T* gc = detail::grad_of(cn);
          const T* us = un->data.data();
          const T* ds = dn->data.data();
          const T* as = an->data.data();
          const T* bs = bn->data.data();
          const T* cs = cn->data.data();
          // dh carries dL/dh_t; walking backward it picks up a_bar_{t+1} * dh_{t+1}.
          std::vector<T> dh(d * n, T(0));
          for (std::size_t t = len; t-- > 0;) {
            const T* ht = states.data() + t * d * n;
            const T* hprev = t > 0 ? states.data() + (t - 1) * d * n : nullptr;
            const T* bt = bs + t * n;
            const T* ct = cs + t * n;
            for (std::size_t ch = 0; ch < d; ++ch) {
              const T gy = g[t * d + ch];
              const T dt = ds[t * d + ch];
              const T ut = us[t * d + ch];
              const T* ac = as + ch * n;
              T* dhc = dh.data() + ch * n;
              T g_delta = T(0), g_u = T(0);
              for (std::size_t k = 0; k < n; ++k) {
                const std::size_t i = ch * n + k;
                if (gc) gc[t * n + k] += gy * ht[i];
                dhc[k] += gy * ct[k];
                const T abar = std::exp(dt * ac[k]);
                const T hp = hprev ? hprev[i] : T(0);
                // through a_bar = exp(delta*A)
                const T g_abar = dhc[k] * hp;
                g_delta += g_abar * abar * ac[k];
                if (ga) ga[i] += g_abar * abar * dt;
                // through delta * B * u
                g_delta += dhc[k] * bt[k] * ut;
                g_u += dhc[k] * dt * bt[k];
                if (gb) gb[t * n + k] += dhc[k] * dt * ut;
                dhc[k] *= abar;
              }
              if (gd) gd[t * d + ch] += g_delta;
              if (gu) gu[t * d + ch] += g_u;
            }
          }
        });
  }
  return out;
}

/// Learnable parameters of the selective SSM for an inner width D and state
/// size N. The state matrix is diagonal: A = -exp(a_log).
template <typename T>
struct SsmParams {
  BasicTensor<T> a_log;    // [D, N]
  BasicTensor<T> w_b;      // [D, N]   x_t -> B_t
  BasicTensor<T> w_c;      // [D, N]   x_t -> C_t
  BasicTensor<T> w_delta;  // [D, D]   x_t -> pre-softplus step
  BasicTensor<T> b_delta;  // [D]

  std::size_t inner() const { return a_log.dim(0); }
  std::size_t state() const { return a_log.dim(1); }

  /// a_log = log(1..N) per channel; step bias set so softplus(bias) is
  /// log-uniform in [1e-3, 1e-1].
  static SsmParams init(std::size_t inner, std::size_t state, Rng& rng) {
    SsmParams p;
    p.a_log = BasicTensor<T>({inner, state});
    auto al = p.a_log.mutable_data();
    for (std::size_t d = 0; d < inner; ++d)
      for (std::size_t k = 0; k < state; ++k) al[d * state + k] = static_cast<T>(std::log(static_cast<double>(k + 1)));
    const double bound = 1.0 / std::sqrt(static_cast<double>(inner));
    p.w_b = uniform_tensor<T>({inner, state}, -bound, bound, rng);
    p.w_c = uniform_tensor<T>({inner, state}, -bound, bound, rng);
    p.w_delta = uniform_tensor<T>({inner, inner}, -bound * 0.1, bound * 0.1, rng);
    p.b_delta = BasicTensor<T>({inner});
    for (auto& v : p.b_delta.mutable_data()) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      v = static_cast<T>(dt + std::log(-std::expm1(-dt)));  // inverse softplus
    }
    for (auto* t : {&p.a_log, &p.w_b, &p.w_c, &p.w_delta, &p.b_delta}) t->set_requires_grad(true);
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "a_log", a_log, true);
    f(prefix + "w_b", w_b, true);
    f(prefix + "w_c", w_c, true);
    f(prefix + "w_delta", w_delta, true);
    f(prefix + "b_delta", b_delta, true);
  }
};

/// Input-dependent scan: per step, delta_t = softplus(x_t W_delta + b_delta),
/// B_t = x_t W_b, C_t = x_t W_c, followed by the fused recurrence.
template <typename T>
BasicTensor<T> scan_selective(const SsmParams<T>& p, const BasicTensor<T>& x) {
  detail::require(x.rank() == 2 && x.dim(1) == p.inner(),
                  "scan_selective: input " + to_string(x.shape()) + " vs inner width " + std::to_string(p.inner()));
  auto delta = softplus(linear(x, p.w_delta, p.b_delta));
  auto b = matmul(x, p.w_b);
  auto c = matmul(x, p.w_c);
  auto a = scale(exp(p.a_log), T(-1));
  return selective_scan(x, delta, a, b, c);
}

}  // namespace vmatcher
