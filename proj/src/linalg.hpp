#pragma once

// Small dense solves for the closed-form linear-basis fit.

#include <cmath>
#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

namespace dynainfer::linalg {

/// Row-major n x n system with a row-major n x k right-hand side.
/// Gaussian elimination with partial pivoting; nullopt when a pivot falls
/// below `rel_tol` times the largest entry of A.
inline std::optional<std::vector<double>> solve(std::vector<double> a,
                                                std::vector<double> b,
                                                std::size_t n, std::size_t k,
                                                double rel_tol = 1e-13) {
  double scale = 0.0;
  for (double v : a) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return std::nullopt;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    }
    if (std::abs(a[piv * n + col]) <= rel_tol * scale) return std::nullopt;
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
      for (std::size_t c = 0; c < k; ++c) std::swap(b[col * k + c], b[piv * k + c]);
    }
    const double d = a[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / d;
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      for (std::size_t c = 0; c < k; ++c) b[r * k + c] -= f * b[col * k + c];
    }
  }
  for (std::size_t col = n; col-- > 0;) {
    const double d = a[col * n + col];
    for (std::size_t c = 0; c < k; ++c) {
      double s = b[col * k + c];
      for (std::size_t j = col + 1; j < n; ++j) s -= a[col * n + j] * b[j * k + c];
      b[col * k + c] = s / d;
    }
  }
  return b;
}

/// C[n, k] = A[n, m] * B[m, k]
inline std::vector<double> matmul(const std::vector<double>& a,
                                  const std::vector<double>& b, std::size_t n,
                                  std::size_t m, std::size_t k) {
  std::vector<double> c(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double aij = a[i * m + j];
      for (std::size_t l = 0; l < k; ++l) c[i * k + l] += aij * b[j * k + l];
    }
  }
  return c;
}

}  // namespace dynainfer::linalg
