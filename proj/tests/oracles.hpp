#ifndef CONVREC_TESTS_ORACLES_HPP_
#define CONVREC_TESTS_ORACLES_HPP_

// Test-only reference computations. Everything here is deliberately naive and
// kept independent of the library implementation paths it checks.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracles {

// Naive triple-loop matrix product on plain vectors (row-major).
inline std::vector<double> matmul_naive(const std::vector<double>& a, std::size_t ar,
                                        std::size_t ac, const std::vector<double>& b,
                                        std::size_t bc) {
  std::vector<double> out(ar * bc, 0.0);
  for (std::size_t i = 0; i < ar; ++i)
    for (std::size_t j = 0; j < bc; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < ac; ++l) acc += a[i * ac + l] * b[l * bc + j];
      out[i * bc + j] = acc;
    }
  return out;
}

// Softmax evaluated in extended precision without max subtraction.
inline std::vector<double> softmax_long_double(const std::vector<double>& scores) {
  long double sum = 0.0L;
  std::vector<long double> e(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    e[i] = expl(static_cast<long double>(scores[i]));
    sum += e[i];
  }
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = static_cast<double>(e[i] / sum);
  return out;
}

// Singular values via one-sided Jacobi rotations on the columns of A (r x c,
// row-major, r >= c not required). Returns the largest singular value.
inline double largest_singular_value_jacobi(std::vector<double> a, std::size_t rows,
                                            std::size_t cols) {
  // Work on A^T A implicitly by orthogonalizing column pairs of A.
  auto col_dot = [&](std::size_t p, std::size_t q) {
    double acc = 0.0;
    for (std::size_t i = 0; i < rows; ++i) acc += a[i * cols + p] * a[i * cols + q];
    return acc;
  };
  const int max_sweeps = 60;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        const double apq = col_dot(p, q);
        const double app = col_dot(p, p);
        const double aqq = col_dot(q, q);
        off += apq * apq;
        if (std::abs(apq) <= 1e-300) continue;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double vp = a[i * cols + p];
          const double vq = a[i * cols + q];
          a[i * cols + p] = c * vp - s * vq;
          a[i * cols + q] = s * vp + c * vq;
        }
      }
    }
    if (off <= 1e-28) break;
  }
  double best = 0.0;
  for (std::size_t p = 0; p < cols; ++p) best = std::max(best, col_dot(p, p));
  return std::sqrt(best);
}

}  // namespace oracles

#endif  // CONVREC_TESTS_ORACLES_HPP_
