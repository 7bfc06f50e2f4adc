#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace gravityflow::detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C (m x n) += op(A) * op(B), all row-major. op(A) is m x k, op(B) is k x n.
template <class T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                     bool trans_a, bool trans_b) {
  using Map = Eigen::Map<RowMatrix<T>>;
  using ConstMap = Eigen::Map<const RowMatrix<T>>;
  const auto im = static_cast<Eigen::Index>(m);
  const auto ik = static_cast<Eigen::Index>(k);
  const auto in = static_cast<Eigen::Index>(n);
  Map cm(c, im, in);
  if (!trans_a && !trans_b) {
    cm.noalias() += ConstMap(a, im, ik) * ConstMap(b, ik, in);
  } else if (trans_a && !trans_b) {
    cm.noalias() += ConstMap(a, ik, im).transpose() * ConstMap(b, ik, in);
  } else if (!trans_a && trans_b) {
    cm.noalias() += ConstMap(a, im, ik) * ConstMap(b, in, ik).transpose();
  } else {
    cm.noalias() += ConstMap(a, ik, im).transpose() * ConstMap(b, in, ik).transpose();
  }
}

}  // namespace gravityflow::detail
