#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nlb/common.hpp"
#include "nlb/linalg.hpp"
#include "nlb/mlp.hpp"  // ScalarAdam
#include "nlb/rng.hpp"
#include "nlb/slice.hpp"
#include "nlb/special.hpp"

// Hyperparameter tuner: a Matern-5/2 GP over normalized hyperparameters,
// maximum-likelihood fitted (5000 ADAM steps, lr 1e-2) then slice-sampled
// (20 samples), with expected improvement averaged over the GP samples and a
// random-search warmup.
namespace nlb::bo {

enum class Scale { Linear, Log };

struct Dim {
  std::string name;
  double lo;
  double hi;
  Scale scale = Scale::Linear;
};

struct SearchSpace {
  std::vector<Dim> dims;

  Index size() const { return static_cast<Index>(dims.size()); }

  Vector normalize(const Vector& x) const {
    Vector u(size());
    for (Index i = 0; i < size(); ++i) {
      const Dim& d = dims[i];
      u(i) = d.scale == Scale::Linear
                 ? (x(i) - d.lo) / (d.hi - d.lo)
                 : (std::log(x(i)) - std::log(d.lo)) /
                       (std::log(d.hi) - std::log(d.lo));
    }
    return u;
  }

  Vector denormalize(const Vector& u) const {
    Vector x(size());
    for (Index i = 0; i < size(); ++i) {
      const Dim& d = dims[i];
      x(i) = d.scale == Scale::Linear
                 ? d.lo + u(i) * (d.hi - d.lo)
                 : std::exp(std::log(d.lo) +
                            u(i) * (std::log(d.hi) - std::log(d.lo)));
    }
    return x;
  }
};

// sf2 (1 + sqrt(5) r/l + 5 r^2/(3 l^2)) exp(-sqrt(5) r/l)
inline double matern52(double r, double lengthscale, double signal_variance) {
  const double s = std::sqrt(5.0) * r / lengthscale;
  return signal_variance * (1.0 + s + s * s / 3.0) * std::exp(-s);
}

struct GpHypers {
  double log_signal = 0.0;
  Vector log_lengthscales;  // one per input dimension (ARD)
  double log_noise = std::log(1e-2);
};

namespace detail {

// Noise floor during optimization; keeps the Gram matrix factorable for
// noise-free objectives without masking genuinely fitted noise levels.
inline constexpr double kMinLogNoise = -18.0;

// Per-dimension squared coordinate differences, built once per data set.
inline std::vector<Matrix> pairwise_sq(const Matrix& x) {
  const Index n = x.rows();
  std::vector<Matrix> d2(x.cols(), Matrix(n, n));
  for (Index k = 0; k < x.cols(); ++k)
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) {
        const double d = x(i, k) - x(j, k);
        d2[k](i, j) = d * d;
      }
  return d2;
}

inline Matrix kernel_from_sq(const std::vector<Matrix>& d2, const GpHypers& h) {
  const Index n = d2.front().rows();
  const double sf2 = std::exp(h.log_signal);
  Matrix r2 = Matrix::Zero(n, n);
  for (std::size_t k = 0; k < d2.size(); ++k)
    r2 += d2[k] / std::exp(2.0 * h.log_lengthscales(static_cast<Index>(k)));
  Matrix kf(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      const double s = std::sqrt(5.0 * r2(i, j));
      kf(i, j) = sf2 * (1.0 + s + s * s / 3.0) * std::exp(-s);
    }
  return kf;
}

}  // namespace detail

// GP log marginal likelihood with gradients w.r.t. the log hyperparameters.
inline double gp_log_marginal(const std::vector<Matrix>& d2, const Vector& y,
                              const GpHypers& h, GpHypers* grads) {
  const Index n = y.size();
  const double sn2 = std::exp(h.log_noise);
  Matrix kf = detail::kernel_from_sq(d2, h);
  Matrix k = kf;
  k.diagonal().array() += sn2;
  CholeskyFactor chol = cholesky(k);
  const Vector alpha = solve_psd(chol, y);
  const double value = -0.5 * y.dot(alpha) - 0.5 * logdet_psd(chol) -
                       0.5 * static_cast<double>(n) * kLog2Pi;
  if (!grads) return value;

  // dL/dtheta = 1/2 tr((alpha alpha' - K^-1) dK/dtheta)
  Matrix w = alpha * alpha.transpose() - inverse_psd(chol);
  grads->log_lengthscales = Vector::Zero(d2.size());
  grads->log_signal = 0.5 * (w.array() * kf.array()).sum();
  grads->log_noise = 0.5 * sn2 * w.trace();
  const double sf2 = std::exp(h.log_signal);
  Matrix r2 = Matrix::Zero(n, n);
  for (std::size_t kk = 0; kk < d2.size(); ++kk)
    r2 += d2[kk] / std::exp(2.0 * h.log_lengthscales(static_cast<Index>(kk)));
  for (std::size_t kk = 0; kk < d2.size(); ++kk) {
    const double l2 = std::exp(2.0 * h.log_lengthscales(static_cast<Index>(kk)));
    double acc = 0.0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) {
        const double s = std::sqrt(5.0 * r2(i, j));
        // d k_ij / d log l_k = (5/3) sf2 (1 + s) e^{-s} d2_k(i,j) / l_k^2
        acc += w(i, j) * (5.0 / 3.0) * sf2 * (1.0 + s) * std::exp(-s) *
               d2[kk](i, j) / l2;
      }
    grads->log_lengthscales(static_cast<Index>(kk)) = 0.5 * acc;
  }
  return value;
}

inline double gp_log_marginal(const Matrix& x, const Vector& y, const GpHypers& h,
                              GpHypers* grads) {
  return gp_log_marginal(detail::pairwise_sq(x), y, h, grads);
}

struct GpSample {
  GpHypers hypers;
  CholeskyFactor chol;
  Vector alpha;
};

struct GpSurrogate {
  Matrix x;  // normalized inputs, n x d
  Vector y;  // standardized outputs
  double y_mean = 0.0;
  double y_sd = 1.0;
  std::vector<GpSample> samples;
};

// ML fit of the GP hyperparameters followed by 20 slice samples on a
// log-space box of +-5 around the optimum (uniform prior).
inline GpSurrogate gp_fit(const Matrix& x_norm, const Vector& y_raw,
                          std::uint64_t seed, int n_slice_samples = 20,
                          int adam_steps = 5000) {
  if (x_norm.rows() < 2) throw DimensionMismatch("gp_fit: need at least 2 points");
  GpSurrogate gp;
  gp.x = x_norm;
  gp.y_mean = y_raw.mean();
  gp.y_sd = std::sqrt((y_raw.array() - gp.y_mean).square().sum() /
                      static_cast<double>(y_raw.size()));
  if (!(gp.y_sd > 0.0)) gp.y_sd = 1.0;
  gp.y = (y_raw.array() - gp.y_mean) / gp.y_sd;

  const std::vector<Matrix> d2 = detail::pairwise_sq(x_norm);
  const Index d = x_norm.cols();

  GpHypers h;
  h.log_signal = 0.0;
  h.log_lengthscales = Vector::Constant(d, std::log(0.5));
  h.log_noise = std::log(1e-2);

  mlp::ScalarAdam sig_adam{.lr = 1e-2}, noise_adam{.lr = 1e-2};
  std::vector<mlp::ScalarAdam> len_adam(d, mlp::ScalarAdam{.lr = 1e-2});
  for (int step = 0; step < adam_steps; ++step) {
    GpHypers g;
    const double value = gp_log_marginal(d2, gp.y, h, &g);
    if (!std::isfinite(value))
      throw NonFiniteObjective("gp_fit: marginal likelihood became non-finite");
    h.log_signal += sig_adam.step(-g.log_signal);
    h.log_noise =
        std::max(detail::kMinLogNoise, h.log_noise + noise_adam.step(-g.log_noise));
    for (Index i = 0; i < d; ++i)
      h.log_lengthscales(i) += len_adam[i].step(-g.log_lengthscales(i));
  }

  // Slice sampling around the optimum; coordinates packed as
  // [log sf2, log l_1..log l_d, log sn2].
  Vector x0(d + 2);
  x0(0) = h.log_signal;
  x0.segment(1, d) = h.log_lengthscales;
  x0(d + 1) = std::max(h.log_noise, detail::kMinLogNoise + 1e-6);
  SliceConfig cfg;
  cfg.n_samples = n_slice_samples;
  cfg.n_burnin = 20;
  for (Index i = 0; i < d + 2; ++i)
    cfg.bounds.push_back({x0(i) - 5.0, x0(i) + 5.0});
  cfg.bounds[static_cast<std::size_t>(d + 1)][0] =
      std::max(cfg.bounds[static_cast<std::size_t>(d + 1)][0], detail::kMinLogNoise);

  auto logf = [&](const Vector& packed) {
    GpHypers q;
    q.log_signal = packed(0);
    q.log_lengthscales = packed.segment(1, d);
    q.log_noise = packed(d + 1);
    try {
      return gp_log_marginal(d2, gp.y, q, nullptr);
    } catch (const NotPositiveDefinite&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
  Rng rng(derive_seed(seed, {0x69fULL}));
  std::vector<Vector> chain = slice_sweep(logf, x0, cfg, rng);

  for (const Vector& packed : chain) {
    GpSample s;
    s.hypers.log_signal = packed(0);
    s.hypers.log_lengthscales = packed.segment(1, d);
    s.hypers.log_noise = packed(d + 1);
    Matrix k = detail::kernel_from_sq(d2, s.hypers);
    k.diagonal().array() += std::exp(s.hypers.log_noise);
    s.chol = cholesky(k);
    s.alpha = solve_psd(s.chol, gp.y);
    gp.samples.push_back(std::move(s));
  }
  return gp;
}

// Predictive mean/variance (standardized units, observation noise included)
// per hyperparameter sample.
inline std::vector<std::pair<double, double>> gp_posterior(const GpSurrogate& gp,
                                                           const Vector& u) {
  std::vector<std::pair<double, double>> out;
  out.reserve(gp.samples.size());
  const Index n = gp.x.rows();
  for (const GpSample& s : gp.samples) {
    Vector kstar(n);
    for (Index i = 0; i < n; ++i) {
      double r2 = 0.0;
      for (Index k = 0; k < gp.x.cols(); ++k) {
        const double d = gp.x(i, k) - u(k);
        r2 += d * d / std::exp(2.0 * s.hypers.log_lengthscales(k));
      }
      const double sq = std::sqrt(5.0 * r2);
      kstar(i) = std::exp(s.hypers.log_signal) * (1.0 + sq + sq * sq / 3.0) *
                 std::exp(-sq);
    }
    const double mean = kstar.dot(s.alpha);
    const double var = std::exp(s.hypers.log_signal) +
                       std::exp(s.hypers.log_noise) -
                       kstar.dot(solve_psd(s.chol, kstar));
    out.emplace_back(mean, std::max(var, 0.0));
  }
  return out;
}

// Maximization expected improvement.
inline double expected_improvement(double mean, double variance, double best) {
  const double s = std::sqrt(std::max(variance, 0.0));
  if (s == 0.0) return std::max(mean - best, 0.0);
  const double z = (mean - best) / s;
  return (mean - best) * normal_cdf(z) + s * normal_pdf(z);
}

struct BoHistoryEntry {
  Vector point;  // original units
  double value = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
  bool failed = false;
};

struct BoResult {
  Vector best_point;
  double best_value = -std::numeric_limits<double>::infinity();
  std::vector<BoHistoryEntry> history;
};

// Maximizes `objective` (e.g. validation log likelihood) over the box:
// n_random uniform evaluations, then per iteration a GP fit on all
// observations and an EI step averaged over the GP hyperparameter samples.
// Failed evaluations (exceptions or non-finite values) are kept in the
// history and fed to the GP at one standardized unit below the worst success.
inline BoResult maximize(const std::function<double(const Vector&)>& objective,
                         const SearchSpace& space, int n_random, int n_iters,
                         std::uint64_t seed) {
  const Index d = space.size();
  BoResult result;
  std::vector<Vector> units;  // normalized evaluated points
  Rng rng(derive_seed(seed, {0xb0ULL}));

  auto evaluate = [&](const Vector& u) {
    BoHistoryEntry entry;
    entry.point = space.denormalize(u);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      entry.value = objective(entry.point);
      entry.failed = !std::isfinite(entry.value);
    } catch (const Error&) {
      entry.failed = true;
    }
    entry.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!entry.failed && entry.value > result.best_value) {
      result.best_value = entry.value;
      result.best_point = entry.point;
    }
    units.push_back(u);
    result.history.push_back(entry);
  };

  for (int i = 0; i < n_random; ++i) {
    Vector u(d);
    for (Index k = 0; k < d; ++k) u(k) = rng.uniform();
    evaluate(u);
  }

  for (int iter = 0; iter < n_iters; ++iter) {
    // Assemble the GP training set, substituting failures.
    double worst = std::numeric_limits<double>::infinity();
    std::vector<double> successes;
    for (const auto& e : result.history)
      if (!e.failed) {
        worst = std::min(worst, e.value);
        successes.push_back(e.value);
      }
    double sd = 1.0;
    if (successes.size() > 1) {
      double mean = 0.0;
      for (double v : successes) mean += v;
      mean /= successes.size();
      double var = 0.0;
      for (double v : successes) var += (v - mean) * (v - mean);
      sd = std::sqrt(var / successes.size());
      if (!(sd > 0.0)) sd = 1.0;
    }
    const double substitute = successes.empty() ? 0.0 : worst - sd;

    const Index n = static_cast<Index>(units.size());
    Matrix x(n, d);
    Vector y(n);
    for (Index i = 0; i < n; ++i) {
      x.row(i) = units[static_cast<std::size_t>(i)].transpose();
      const auto& e = result.history[static_cast<std::size_t>(i)];
      y(i) = e.failed ? substitute : e.value;
    }

    GpSurrogate gp = gp_fit(x, y, derive_seed(seed, {0xf17ULL, (std::uint64_t)iter}));
    const double best_std = (y.maxCoeff() - gp.y_mean) / gp.y_sd;

    auto acquisition = [&](const Vector& u) {
      double acc = 0.0;
      for (const auto& [mean, var] : gp_posterior(gp, u))
        acc += expected_improvement(mean, var, best_std);
      return acc / static_cast<double>(gp.samples.size());
    };

    // 1000 uniform candidates, then coordinate descent from the best 5.
    const int n_candidates = 1000;
    std::vector<std::pair<double, Vector>> scored;
    scored.reserve(n_candidates);
    for (int c = 0; c < n_candidates; ++c) {
      Vector u(d);
      for (Index k = 0; k < d; ++k) u(k) = rng.uniform();
      scored.emplace_back(acquisition(u), u);
    }
    std::partial_sort(scored.begin(), scored.begin() + 5, scored.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });

    Vector best_u = scored.front().second;
    double best_acq = scored.front().first;
    for (int s = 0; s < 5; ++s) {
      Vector u = scored[s].second;
      double val = scored[s].first;
      double step = 0.1;
      for (int it = 0; it < 50 && step > 1e-4; ++it) {
        bool improved = false;
        for (Index k = 0; k < d; ++k) {
          for (double sign : {1.0, -1.0}) {
            Vector cand = u;
            cand(k) = std::min(1.0, std::max(0.0, cand(k) + sign * step));
            const double a = acquisition(cand);
            if (a > val) {
              val = a;
              u = cand;
              improved = true;
            }
          }
        }
        if (!improved) step *= 0.5;
      }
      if (val > best_acq) {
        best_acq = val;
        best_u = u;
      }
    }
    evaluate(best_u);
  }
  return result;
}

}  // namespace nlb::bo
