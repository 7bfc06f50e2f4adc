#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gravityflow/array.hpp"
#include "gravityflow/errors.hpp"

namespace gravityflow {

// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mean_rank;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("pearson needs two equal-length vectors of size >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(average_ranks(a), average_ranks(b));
}

// Off-diagonal entries of a square [N,N] array in row-major order.
template <class T>
std::vector<double> off_diagonal(const Array<T>& m) {
  if (m.rank() != 2 || m.shape()[0] != m.shape()[1]) throw DimensionError("off_diagonal needs a square matrix, got " + shape_str(m.shape()));
  const std::size_t n = m.shape()[0];
  std::vector<double> out;
  out.reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) out.push_back(static_cast<double>(m[i * n + j]));
  return out;
}

// Fraction of entries with |x| < rel * (row max of |x|), over every row of the
// trailing axis. A row that is entirely zero counts as fully sparse.
template <class T>
double sparsity(const Array<T>& m, double rel = 0.01) {
  if (m.rank() < 1 || m.size() == 0) return 0.0;
  const std::size_t cols = m.shape().back();
  const std::size_t rows = m.size() / cols;
  std::size_t small = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = 0;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, std::abs(static_cast<double>(m[r * cols + c])));
    for (std::size_t c = 0; c < cols; ++c)
      if (mx == 0 || std::abs(static_cast<double>(m[r * cols + c])) < rel * mx) ++small;
  }
  return static_cast<double>(small) / static_cast<double>(m.size());
}

// Mean Shannon entropy (nats) of each row normalised to sum 1. Rows summing
// to zero contribute 0.
template <class T>
double row_entropy(const Array<T>& m) {
  if (m.rank() < 1 || m.size() == 0) return 0.0;
  const std::size_t cols = m.shape().back();
  const std::size_t rows = m.size() / cols;
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += std::abs(static_cast<double>(m[r * cols + c]));
    if (s == 0) continue;
    double h = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double p = std::abs(static_cast<double>(m[r * cols + c])) / s;
      if (p > 0) h -= p * std::log(p);
    }
    total += h;
  }
  return total / static_cast<double>(rows);
}

}  // namespace gravityflow
