#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace hyatt::detail {

/// C (m x n) = op(A) (m x k) * op(B) (k x n), all row-major and densely packed.
/// With `accumulate` the product is added to C instead of overwriting it.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const RowMat>;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Eigen::Map<RowMat> C(c, M, N);
  if (k == 0) {
    if (!accumulate) C.setZero();
    return;
  }
  ConstMap A(a, trans_a ? K : M, trans_a ? M : K);
  ConstMap B(b, trans_b ? N : K, trans_b ? K : N);
  auto apply = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      C.noalias() += lhs * rhs;
    } else {
      C.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) {
    apply(A, B);
  } else if (!trans_a && trans_b) {
    apply(A, B.transpose());
  } else if (trans_a && !trans_b) {
    apply(A.transpose(), B);
  } else {
    apply(A.transpose(), B.transpose());
  }
}

}  // namespace hyatt::detail
