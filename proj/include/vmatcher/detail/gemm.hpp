#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace vmatcher::detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>>;

/// C[m,n] = beta*C + op(A)*op(B) over row-major buffers.
/// op(A) is m×k, op(B) is k×n; a stored transposed means A is k×m in memory.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T beta, T* c) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MutMap<T> C(c, M, N);
  if (beta == T(0)) C.setZero();
  else if (beta != T(1)) C *= beta;
  if (m == 0 || n == 0 || k == 0) return;
  if (!trans_a && !trans_b) {
    C.noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
  } else if (trans_a && !trans_b) {
    C.noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, K, N);
  } else {
    C.noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, N, K).transpose();
  }
}

}  // namespace vmatcher::detail
