// Test-only oracles: independent reference implementations used to freeze
// expected values. These deliberately avoid the library's Woodbury-form code
// paths (dense covariances are built explicitly and factored with Eigen).
#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "nlb/linalg.hpp"

namespace oracle {

// log N(y; 0, cov) with an explicit N x N covariance, via Eigen's LDLT.
inline double dense_gaussian_logpdf(const nlb::Vector& y,
                                    const Eigen::MatrixXd& cov) {
  const double n = static_cast<double>(y.size());
  Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
  const double logdet = ldlt.vectorD().array().log().sum();
  const double quad = y.dot(ldlt.solve(y));
  return -0.5 * (n * std::log(2.0 * std::numbers::pi) + logdet + quad);
}

// log T(y; 0, scale_matrix, dof) with an explicit N x N scale matrix.
inline double dense_student_t_logpdf(const nlb::Vector& y,
                                     const Eigen::MatrixXd& scale, double dof) {
  const double n = static_cast<double>(y.size());
  Eigen::LDLT<Eigen::MatrixXd> ldlt(scale);
  const double logdet = ldlt.vectorD().array().log().sum();
  const double quad = y.dot(ldlt.solve(y));
  return std::lgamma(0.5 * (dof + n)) - std::lgamma(0.5 * dof) -
         0.5 * n * std::log(dof * std::numbers::pi) - 0.5 * logdet -
         0.5 * (dof + n) * std::log1p(quad / dof);
}

// Central finite difference of a scalar function of one coordinate.
inline double central_diff(const std::function<double(double)>& f, double x,
                           double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

// Kolmogorov-Smirnov statistic of samples against a CDF.
inline double ks_statistic(std::vector<double> samples,
                           const std::function<double(double)>& cdf) {
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = cdf(samples[i]);
    d = std::max(d, std::abs(f - static_cast<double>(i) / n));
    d = std::max(d, std::abs(static_cast<double>(i + 1) / n - f));
  }
  return d;
}

// Regularized lower incomplete gamma P(a, x) (series / continued fraction).
inline double gamma_p(double a, double x) {
  if (x <= 0.0) return 0.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - gln);
  }
  double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return 1.0 - std::exp(-x + a * std::log(x) - gln) * h;
}

// Upper-tail p-value of a chi-square statistic with k degrees of freedom.
inline double chi2_sf(double stat, double k) {
  return 1.0 - gamma_p(0.5 * k, 0.5 * stat);
}

// Composite Simpson integration on [lo, hi] with n (even) intervals.
inline double simpson(const std::function<double(double)>& f, double lo,
                      double hi, int n) {
  const double h = (hi - lo) / n;
  double s = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) s += f(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline double gamma_pdf(double x, double shape, double rate) {
  if (x <= 0.0) return 0.0;
  return std::exp(shape * std::log(rate) + (shape - 1.0) * std::log(x) -
                  rate * x - std::lgamma(shape));
}

inline double gamma_cdf(double x, double shape, double rate) {
  return gamma_p(shape, rate * x);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace oracle
