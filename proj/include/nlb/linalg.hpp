#pragma once

#include <Eigen/Core>
#include <cmath>
#include <sstream>

#include "nlb/common.hpp"

namespace nlb {

// Dense row-major storage throughout: feature dimensions stay small
// (M <= 51), so dense kernels are both the simplest and the fastest option.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct CholeskyFactor {
  Matrix lower;  // L with L L^T = A (strictly positive diagonal)
  Index dim() const { return lower.rows(); }
};

namespace detail {

// Plain left-looking Cholesky; returns false on a non-positive pivot.
inline bool cholesky_in_place(Matrix& a) {
  const Index n = a.rows();
  for (Index j = 0; j < n; ++j) {
    double d = a(j, j);
    for (Index k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double l_jj = std::sqrt(d);
    a(j, j) = l_jj;
    for (Index i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (Index k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / l_jj;
    }
  }
  // Zero the strict upper triangle so the factor is exactly lower triangular.
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) a(i, j) = 0.0;
  return true;
}

}  // namespace detail

// Cholesky factorization of a symmetric positive definite matrix. On failure
// a diagonal jitter of 1e-10 * mean(diag) is added, escalating tenfold up to
// three times: Gram matrices and posterior precisions can be near-singular
// for extreme slice-sampled hyperparameters.
inline CholeskyFactor cholesky(const Matrix& a) {
  if (a.rows() != a.cols())
    throw DimensionMismatch("cholesky: matrix must be square");
  const Index n = a.rows();
  const double scale = a.cwiseAbs().maxCoeff();
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j)
      if (std::abs(a(i, j) - a(j, i)) > 1e-8 * std::max(scale, 1e-300))
        throw DimensionMismatch("cholesky: matrix not symmetric");

  Matrix work = a;
  if (detail::cholesky_in_place(work)) return {std::move(work)};

  const double mean_diag = n > 0 ? a.diagonal().mean() : 0.0;
  double jitter = 1e-10 * mean_diag;
  for (int attempt = 0; attempt < 3 && jitter > 0.0; ++attempt, jitter *= 10.0) {
    work = a;
    work.diagonal().array() += jitter;
    if (detail::cholesky_in_place(work)) return {std::move(work)};
  }
  std::ostringstream msg;
  msg << "cholesky: matrix of dim " << n << " not positive definite";
  throw NotPositiveDefinite(msg.str());
}

// Solves (L L^T) x = b by forward/back substitution.
inline Matrix solve_psd(const CholeskyFactor& f, const Matrix& b) {
  if (f.dim() != b.rows())
    throw DimensionMismatch("solve_psd: dimension mismatch");
  const Index n = f.dim();
  const Index k = b.cols();
  const Matrix& l = f.lower;
  Matrix x = b;
  for (Index c = 0; c < k; ++c) {
    for (Index i = 0; i < n; ++i) {
      double s = x(i, c);
      for (Index j = 0; j < i; ++j) s -= l(i, j) * x(j, c);
      x(i, c) = s / l(i, i);
    }
    for (Index i = n - 1; i >= 0; --i) {
      double s = x(i, c);
      for (Index j = i + 1; j < n; ++j) s -= l(j, i) * x(j, c);
      x(i, c) = s / l(i, i);
    }
  }
  return x;
}

inline Vector solve_psd(const CholeskyFactor& f, const Vector& b) {
  Matrix col = b;
  return solve_psd(f, col).col(0);
}

// log|A| for A = L L^T.
inline double logdet_psd(const CholeskyFactor& f) {
  return 2.0 * f.lower.diagonal().array().log().sum();
}

// Explicit inverse of the factored matrix; used where evidence gradients
// need all entries of V_N rather than a single solve.
inline Matrix inverse_psd(const CholeskyFactor& f) {
  Matrix id = Matrix::Identity(f.dim(), f.dim());
  return solve_psd(f, id);
}

}  // namespace nlb
