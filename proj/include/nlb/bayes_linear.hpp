#pragma once

#include <cmath>

#include "nlb/common.hpp"
#include "nlb/linalg.hpp"
#include "nlb/predictive.hpp"
#include "nlb/special.hpp"

// Exact conjugate Bayesian linear regression on neural features.
//
// Two heads are provided: a Gaussian prior over the output weights with a
// fixed noise variance, and a normal-inverse-gamma prior that integrates the
// noise variance out, yielding Student-t predictives. Marginal likelihoods
// are evaluated in the M x M form obtained from the Woodbury identity, so the
// cost is O(N M^2 + M^3) and no N x N matrix is ever formed.
//
// Feature convention: the design matrix has M columns, the first M-1 holding
// hidden-unit activations (prior variance alpha_w each) and the last the
// constant bias feature (prior variance alpha_b).
namespace nlb {

struct GaussianPrior {
  double alpha_w;
  double alpha_b;
  double sigma2;
};

struct NigPrior {
  double alpha_w;
  double alpha_b;
  double a0;
  double b0;
};

// Per-column prior variances diag(A).
inline Vector prior_diag(double alpha_w, double alpha_b, Index m) {
  Vector a = Vector::Constant(m, alpha_w);
  a(m - 1) = alpha_b;
  return a;
}

// Sufficient statistics of (Phi, y): everything the evidence and posterior
// need except the hyperparameters, so slice sweeps pay O(M^3) per evaluation.
struct SuffStats {
  Matrix gram;  // Phi^T Phi
  Vector xty;   // Phi^T y
  double yty;
  Index n;
  Index m;
};

inline SuffStats suff_stats(const Matrix& phi, const Vector& y) {
  if (phi.rows() != y.size())
    throw DimensionMismatch("suff_stats: row count does not match targets");
  SuffStats s;
  s.gram = phi.transpose() * phi;
  s.xty = phi.transpose() * y;
  s.yty = y.squaredNorm();
  s.n = phi.rows();
  s.m = phi.cols();
  return s;
}

// ---------------------------------------------------------------------------
// Gaussian-prior head
// ---------------------------------------------------------------------------

struct GaussianBlrPosterior {
  Vector w_n;
  CholeskyFactor vn_inv_chol;  // factor of V_N^{-1}
  GaussianPrior prior;
  Index n;
};

inline GaussianBlrPosterior blr_fit(const SuffStats& s, const GaussianPrior& prior) {
  Matrix vn_inv = s.gram / prior.sigma2;
  vn_inv.diagonal() += prior_diag(prior.alpha_w, prior.alpha_b, s.m).cwiseInverse();
  CholeskyFactor chol = cholesky(vn_inv);
  Vector w_n = solve_psd(chol, s.xty) / prior.sigma2;
  return {std::move(w_n), std::move(chol), prior, s.n};
}

inline GaussianBlrPosterior blr_fit(const Matrix& phi, const Vector& y,
                                    const GaussianPrior& prior) {
  return blr_fit(suff_stats(phi, y), prior);
}

inline GaussianPredictive blr_predict(const GaussianBlrPosterior& post,
                                      const Vector& phi_star) {
  if (phi_star.size() != post.w_n.size())
    throw DimensionMismatch("blr_predict: feature length mismatch");
  const double mean = post.w_n.dot(phi_star);
  const double var =
      post.prior.sigma2 + phi_star.dot(solve_psd(post.vn_inv_chol, phi_star));
  return {mean, var};
}

// log N(y; 0, sigma^2 I + Phi A Phi^T) in Woodbury form:
//   log|K|     = N log sigma^2 + log|A| + log|V_N^{-1}|
//   y' K^-1 y  = (y'y - w_N' Phi' y) / sigma^2
inline double blr_log_marginal_value(const SuffStats& s, const GaussianPrior& prior) {
  const Vector a = prior_diag(prior.alpha_w, prior.alpha_b, s.m);
  Matrix vn_inv = s.gram / prior.sigma2;
  vn_inv.diagonal() += a.cwiseInverse();
  CholeskyFactor chol = cholesky(vn_inv);
  const Vector w_n = solve_psd(chol, s.xty) / prior.sigma2;
  const double quad = (s.yty - w_n.dot(s.xty)) / prior.sigma2;
  const double logdet_k = static_cast<double>(s.n) * std::log(prior.sigma2) +
                          a.array().log().sum() + logdet_psd(chol);
  return -0.5 * (static_cast<double>(s.n) * kLog2Pi + logdet_k + quad);
}

struct BlrEvidence {
  double value;
  Matrix d_phi;  // N x M, includes the (unused) bias column
  double d_log_alpha_w;
  double d_log_alpha_b;
  double d_log_sigma2;
};

// Evidence with exact gradients w.r.t. the feature matrix and the logs of the
// positive hyperparameters; optimizers and samplers all work in log space.
inline BlrEvidence blr_log_marginal(const Matrix& phi, const Vector& y,
                                    const GaussianPrior& prior) {
  const SuffStats s = suff_stats(phi, y);
  const Vector a = prior_diag(prior.alpha_w, prior.alpha_b, s.m);
  const double s2 = prior.sigma2;

  Matrix vn_inv = s.gram / s2;
  vn_inv.diagonal() += a.cwiseInverse();
  CholeskyFactor chol = cholesky(vn_inv);
  const Matrix v_n = inverse_psd(chol);
  const Vector w_n = (v_n * s.xty) / s2;

  BlrEvidence out;
  const double quad = (s.yty - w_n.dot(s.xty)) / s2;
  out.value = -0.5 * (static_cast<double>(s.n) * kLog2Pi +
                      static_cast<double>(s.n) * std::log(s2) +
                      a.array().log().sum() + logdet_psd(chol) + quad);

  const Vector resid = y - phi * w_n;           // N
  const Matrix vg = v_n * s.gram;               // M x M
  const Vector v = (s.xty - s.gram * w_n) / s2; // Phi^T K^-1 y

  // d/d log sigma^2
  const double tr_vg = vg.trace();
  out.d_log_sigma2 =
      -0.5 * (static_cast<double>(s.n) - tr_vg / s2 - resid.squaredNorm() / s2);

  // d/d alpha_i = -1/2 (S_ii - v_i^2) with S = Phi^T K^-1 Phi
  const Matrix sdiag_full = s.gram / s2 - (s.gram * vg) / (s2 * s2);
  out.d_log_alpha_w = 0.0;
  out.d_log_alpha_b = 0.0;
  for (Index i = 0; i < s.m; ++i) {
    const double d_alpha_i = -0.5 * (sdiag_full(i, i) - v(i) * v(i));
    if (i + 1 == s.m)
      out.d_log_alpha_b += prior.alpha_b * d_alpha_i;
    else
      out.d_log_alpha_w += prior.alpha_w * d_alpha_i;
  }

  // d/d Phi = (-K^-1 Phi + beta v^T) A with beta = resid / sigma^2
  Matrix d_phi = -(phi / s2) + (phi * vg) / (s2 * s2);
  d_phi.noalias() += (resid / s2) * v.transpose();
  d_phi = d_phi * a.asDiagonal();
  out.d_phi = std::move(d_phi);
  return out;
}

// ---------------------------------------------------------------------------
// Normal-inverse-gamma head
// ---------------------------------------------------------------------------

struct NigPosterior {
  Vector w_n;
  CholeskyFactor vn_inv_chol;
  double a_n;
  double b_n;
  NigPrior prior;
  Index n;
};

inline NigPosterior nig_fit(const SuffStats& s, const NigPrior& prior) {
  Matrix vn_inv = s.gram;
  vn_inv.diagonal() += prior_diag(prior.alpha_w, prior.alpha_b, s.m).cwiseInverse();
  CholeskyFactor chol = cholesky(vn_inv);
  Vector w_n = solve_psd(chol, s.xty);
  const double a_n = prior.a0 + 0.5 * static_cast<double>(s.n);
  // Cancellation in y'y - w_N' V_N^{-1} w_N can leave a tiny negative for
  // near-interpolating fits; clamp.
  const double b_n =
      std::max(prior.b0 + 0.5 * (s.yty - w_n.dot(s.xty)), 1e-12);
  return {std::move(w_n), std::move(chol), a_n, b_n, prior, s.n};
}

inline NigPosterior nig_fit(const Matrix& phi, const Vector& y, const NigPrior& prior) {
  return nig_fit(suff_stats(phi, y), prior);
}

inline StudentTPredictive nig_predict(const NigPosterior& post, const Vector& phi_star) {
  if (phi_star.size() != post.w_n.size())
    throw DimensionMismatch("nig_predict: feature length mismatch");
  const double mean = post.w_n.dot(phi_star);
  const double scale = (post.b_n / post.a_n) *
                       (1.0 + phi_star.dot(solve_psd(post.vn_inv_chol, phi_star)));
  return {mean, scale, 2.0 * post.a_n};
}

// log T(y; 0, (b0/a0)(I + Phi A Phi^T), 2 a0), reduced with the Woodbury
// identity to the standard N-Gamma^{-1} evidence
//   -N/2 log 2pi + 1/2 log|V_N| - 1/2 log|A|
//   + a0 log b0 - a_N log b_N + lgamma(a_N) - lgamma(a0).
inline double nig_log_marginal_value(const SuffStats& s, const NigPrior& prior) {
  const Vector a = prior_diag(prior.alpha_w, prior.alpha_b, s.m);
  Matrix vn_inv = s.gram;
  vn_inv.diagonal() += a.cwiseInverse();
  CholeskyFactor chol = cholesky(vn_inv);
  const Vector w_n = solve_psd(chol, s.xty);
  const double a_n = prior.a0 + 0.5 * static_cast<double>(s.n);
  const double b_n = std::max(prior.b0 + 0.5 * (s.yty - w_n.dot(s.xty)), 1e-12);
  return -0.5 * static_cast<double>(s.n) * kLog2Pi -
         0.5 * (logdet_psd(chol) + a.array().log().sum()) +
         prior.a0 * std::log(prior.b0) - a_n * std::log(b_n) + log_gamma(a_n) -
         log_gamma(prior.a0);
}

struct NigEvidence {
  double value;
  Matrix d_phi;
  double d_log_alpha_w;
  double d_log_alpha_b;
  double d_log_a0;
  double d_log_b0;
};

inline NigEvidence nig_log_marginal(const Matrix& phi, const Vector& y,
                                    const NigPrior& prior) {
  const SuffStats s = suff_stats(phi, y);
  const Vector a = prior_diag(prior.alpha_w, prior.alpha_b, s.m);

  Matrix vn_inv = s.gram;
  vn_inv.diagonal() += a.cwiseInverse();
  CholeskyFactor chol = cholesky(vn_inv);
  const Matrix v_n = inverse_psd(chol);
  const Vector w_n = v_n * s.xty;
  const double a_n = prior.a0 + 0.5 * static_cast<double>(s.n);
  const double b_n = std::max(prior.b0 + 0.5 * (s.yty - w_n.dot(s.xty)), 1e-12);

  NigEvidence out;
  out.value = -0.5 * static_cast<double>(s.n) * kLog2Pi -
              0.5 * (logdet_psd(chol) + a.array().log().sum()) +
              prior.a0 * std::log(prior.b0) - a_n * std::log(b_n) +
              log_gamma(a_n) - log_gamma(prior.a0);

  out.d_log_a0 = prior.a0 * (digamma(a_n) - digamma(prior.a0) +
                             std::log(prior.b0) - std::log(b_n));
  out.d_log_b0 = prior.a0 - prior.b0 * a_n / b_n;

  // d/d log alpha_i = V_ii/(2 alpha_i) - 1/2 + (a_N / 2 b_N) w_i^2 / alpha_i
  out.d_log_alpha_w = 0.0;
  out.d_log_alpha_b = 0.0;
  const double ratio = a_n / b_n;
  for (Index i = 0; i < s.m; ++i) {
    const double alpha_i = a(i);
    const double g = 0.5 * v_n(i, i) / alpha_i - 0.5 +
                     0.5 * ratio * w_n(i) * w_n(i) / alpha_i;
    if (i + 1 == s.m)
      out.d_log_alpha_b += g;
    else
      out.d_log_alpha_w += g;
  }

  // d/d Phi = -Phi V_N + (a_N / b_N) (y - Phi w_N) w_N^T
  Matrix d_phi = -(phi * v_n);
  d_phi.noalias() += ratio * (y - phi * w_n) * w_n.transpose();
  out.d_phi = std::move(d_phi);
  return out;
}

}  // namespace nlb
