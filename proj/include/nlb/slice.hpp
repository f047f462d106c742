#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "nlb/bayes_linear.hpp"
#include "nlb/common.hpp"
#include "nlb/predictive.hpp"
#include "nlb/rng.hpp"

// Univariate slice sampling with stepping-out and shrinkage (Neal, 2003),
// used to marginalize head hyperparameters after training and to sample GP
// hyperparameters inside the Bayesian-optimization tuner. Sampling happens in
// log space of the positive hyperparameters; proposals outside the configured
// box are treated as log density -inf, i.e. a uniform prior on the box.
namespace nlb {

struct SliceConfig {
  double step_width = 1.0;  // log-space units
  int max_stepout = 10;
  int n_samples = 200;
  int n_burnin = 20;
  std::vector<std::array<double, 2>> bounds;  // per-coordinate [lo, hi]
  // Head marginalization samples a window of +- this many log units around
  // the trained hyperparameters (clipped to the global search ranges). The
  // evidence at fixed features keeps increasing toward huge weight-prior
  // variances and vanishing noise, so a chain given the full search box walks
  // to that corner and collapses the predictive variance; the marginalization
  // is meant to average over the local uncertainty around the fit instead.
  double window = 0.5;
};

namespace detail {

constexpr int kMaxShrink = 1000;

// One slice update of a single coordinate. `logf_x` caches logf(x).
inline std::pair<double, double> slice_step(
    const std::function<double(double)>& logf, double x, double logf_x,
    double width, int max_stepout, double lo, double hi, Rng& rng) {
  auto eval = [&](double t) {
    if (t < lo || t > hi) return -std::numeric_limits<double>::infinity();
    return logf(t);
  };
  const double level = logf_x + std::log(rng.uniform_pos());

  // Place the initial interval and step out, splitting the expansion budget
  // randomly between the two sides as in Neal's scheme.
  double left = x - width * rng.uniform();
  double right = left + width;
  int j = static_cast<int>(std::floor(max_stepout * rng.uniform()));
  int k = max_stepout - 1 - j;
  while (j-- > 0 && eval(left) > level) left -= width;
  while (k-- > 0 && eval(right) > level) right += width;

  for (int it = 0; it < kMaxShrink; ++it) {
    const double cand = left + rng.uniform() * (right - left);
    const double cand_logf = eval(cand);
    if (cand_logf > level) return {cand, cand_logf};
    if (cand < x)
      left = cand;
    else
      right = cand;
  }
  throw StuckChain("slice sampler: 1000 consecutive shrinkage rejections");
}

}  // namespace detail

// Chain over a 1-D target. Returns n_samples values after n_burnin updates.
inline std::vector<double> slice_sample_1d(
    const std::function<double(double)>& logf, double x0,
    const SliceConfig& config, Rng& rng) {
  const auto [lo, hi] = config.bounds.empty()
                            ? std::array<double, 2>{-std::numeric_limits<double>::infinity(),
                                                    std::numeric_limits<double>::infinity()}
                            : config.bounds[0];
  double x = x0;
  double fx = logf(x);
  if (!std::isfinite(fx))
    throw NonFiniteObjective("slice_sample_1d: logf(x0) not finite");
  std::vector<double> out;
  out.reserve(config.n_samples);
  for (int i = 0; i < config.n_burnin + config.n_samples; ++i) {
    std::tie(x, fx) = detail::slice_step(logf, x, fx, config.step_width,
                                         config.max_stepout, lo, hi, rng);
    if (i >= config.n_burnin) out.push_back(x);
  }
  return out;
}

// Coordinate-wise sweeps over a multivariate target; one retained sample per
// full sweep after burn-in.
inline std::vector<Vector> slice_sweep(
    const std::function<double(const Vector&)>& logf, const Vector& x0,
    const SliceConfig& config, Rng& rng) {
  Vector x = x0;
  double fx = logf(x);
  if (!std::isfinite(fx))
    throw NonFiniteObjective("slice_sweep: logf(x0) not finite");
  if (!config.bounds.empty() &&
      config.bounds.size() != static_cast<std::size_t>(x.size()))
    throw DimensionMismatch("slice_sweep: bounds size mismatch");

  std::vector<Vector> out;
  out.reserve(config.n_samples);
  for (int sweep = 0; sweep < config.n_burnin + config.n_samples; ++sweep) {
    for (Index c = 0; c < x.size(); ++c) {
      const auto [lo, hi] =
          config.bounds.empty()
              ? std::array<double, 2>{-std::numeric_limits<double>::infinity(),
                                      std::numeric_limits<double>::infinity()}
              : config.bounds[static_cast<std::size_t>(c)];
      auto coord_logf = [&](double v) {
        Vector probe = x;
        probe(c) = v;
        return logf(probe);
      };
      const auto [xc, fc] = detail::slice_step(
          coord_logf, x(c), fx, config.step_width, config.max_stepout, lo, hi, rng);
      x(c) = xc;
      fx = fc;
    }
    if (sweep >= config.n_burnin) out.push_back(x);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head-hyperparameter marginalization
// ---------------------------------------------------------------------------

// Per-coordinate summary of the retained chain (in log space).
struct SliceSummary {
  std::vector<std::string> names;
  Vector mean;
  Vector stddev;
};

inline SliceSummary summarize_chain(const std::vector<Vector>& chain,
                                    std::vector<std::string> names) {
  SliceSummary s;
  s.names = std::move(names);
  const Index d = chain.empty() ? 0 : chain.front().size();
  s.mean = Vector::Zero(d);
  s.stddev = Vector::Zero(d);
  for (const auto& x : chain) s.mean += x;
  s.mean /= static_cast<double>(chain.size());
  for (const auto& x : chain) s.stddev += (x - s.mean).cwiseAbs2();
  s.stddev = (s.stddev / static_cast<double>(chain.size())).cwiseSqrt();
  return s;
}

// Mixture of Gaussian-head posteriors across slice samples of
// (log alpha_w, log alpha_b, log sigma2) under the Gaussian evidence.
struct GaussianHeadMixture {
  std::vector<GaussianBlrPosterior> posteriors;
  SliceSummary summary;

  PredictiveMixture predict(const Vector& phi_star) const {
    std::vector<GaussianPredictive> comps;
    comps.reserve(posteriors.size());
    for (const auto& p : posteriors) comps.push_back(blr_predict(p, phi_star));
    return {std::move(comps)};
  }
};

// Mixture of N-Gamma^{-1} posteriors across slice samples of
// (log alpha_w, log alpha_b, log a0, log b0).
struct NigHeadMixture {
  std::vector<NigPosterior> posteriors;
  SliceSummary summary;

  PredictiveMixture predict(const Vector& phi_star) const {
    std::vector<StudentTPredictive> comps;
    comps.reserve(posteriors.size());
    for (const auto& p : posteriors) comps.push_back(nig_predict(p, phi_star));
    return {std::move(comps)};
  }
};

using HeadMixture = std::variant<GaussianHeadMixture, NigHeadMixture>;

inline PredictiveMixture head_predict(const HeadMixture& head, const Vector& phi_star) {
  return std::visit([&](const auto& h) { return h.predict(phi_star); }, head);
}

inline double clamp_into(double v, const std::array<double, 2>& box) {
  return std::min(std::max(v, box[0]), box[1]);
}

// [init - window, init + window] clipped to the global range, after clamping
// the centre itself into the range.
inline std::array<double, 2> windowed_box(double init, double window,
                                          const std::array<double, 2>& global) {
  const double c = clamp_into(init, global);
  return {std::max(c - window, global[0]), std::min(c + window, global[1])};
}

// 200 slice samples of the Gaussian-head hyperparameters, one posterior per
// sample; Phi'Phi and Phi'y are precomputed once so each evidence evaluation
// costs O(M^3).
inline GaussianHeadMixture slice_marginalize(const SuffStats& stats,
                                             const GaussianPrior& init,
                                             const SliceConfig& config, Rng& rng) {
  SliceConfig cfg = config;
  if (cfg.bounds.empty())
    cfg.bounds = {windowed_box(std::log(init.alpha_w), cfg.window, {-10.0, 10.0}),
                  windowed_box(std::log(init.alpha_b), cfg.window, {-10.0, 10.0}),
                  windowed_box(std::log(init.sigma2), cfg.window, {-10.0, 10.0})};
  auto logf = [&](const Vector& x) {
    return blr_log_marginal_value(
        stats, GaussianPrior{std::exp(x(0)), std::exp(x(1)), std::exp(x(2))});
  };
  Vector x0(3);
  x0 << clamp_into(std::log(init.alpha_w), cfg.bounds[0]),
      clamp_into(std::log(init.alpha_b), cfg.bounds[1]),
      clamp_into(std::log(init.sigma2), cfg.bounds[2]);

  GaussianHeadMixture mix;
  std::vector<Vector> chain = slice_sweep(logf, x0, cfg, rng);
  mix.posteriors.reserve(chain.size());
  for (const auto& x : chain)
    mix.posteriors.push_back(blr_fit(
        stats, GaussianPrior{std::exp(x(0)), std::exp(x(1)), std::exp(x(2))}));
  mix.summary = summarize_chain(chain, {"log_alpha_w", "log_alpha_b", "log_sigma2"});
  return mix;
}

inline NigHeadMixture slice_marginalize(const SuffStats& stats, const NigPrior& init,
                                        const SliceConfig& config, Rng& rng) {
  SliceConfig cfg = config;
  if (cfg.bounds.empty())
    cfg.bounds = {
        windowed_box(std::log(init.alpha_w), cfg.window, {-10.0, 10.0}),
        windowed_box(std::log(init.alpha_b), cfg.window, {-10.0, 10.0}),
        windowed_box(std::log(init.a0), cfg.window, {std::log(1e-3), std::log(20.0)}),
        windowed_box(std::log(init.b0), cfg.window, {std::log(1e-3), std::log(10.0)})};
  auto logf = [&](const Vector& x) {
    return nig_log_marginal_value(
        stats, NigPrior{std::exp(x(0)), std::exp(x(1)), std::exp(x(2)), std::exp(x(3))});
  };
  Vector x0(4);
  x0 << clamp_into(std::log(init.alpha_w), cfg.bounds[0]),
      clamp_into(std::log(init.alpha_b), cfg.bounds[1]),
      clamp_into(std::log(init.a0), cfg.bounds[2]),
      clamp_into(std::log(init.b0), cfg.bounds[3]);

  NigHeadMixture mix;
  std::vector<Vector> chain = slice_sweep(logf, x0, cfg, rng);
  mix.posteriors.reserve(chain.size());
  for (const auto& x : chain)
    mix.posteriors.push_back(nig_fit(
        stats, NigPrior{std::exp(x(0)), std::exp(x(1)), std::exp(x(2)), std::exp(x(3))}));
  mix.summary = summarize_chain(
      chain, {"log_alpha_w", "log_alpha_b", "log_a0", "log_b0"});
  return mix;
}

// Degenerate single-posterior "mixtures" for the no-slice mode.
inline GaussianHeadMixture point_head(const SuffStats& stats, const GaussianPrior& prior) {
  GaussianHeadMixture mix;
  mix.posteriors.push_back(blr_fit(stats, prior));
  Vector point(3);
  point << std::log(prior.alpha_w), std::log(prior.alpha_b), std::log(prior.sigma2);
  mix.summary = summarize_chain({point}, {"log_alpha_w", "log_alpha_b", "log_sigma2"});
  return mix;
}

inline NigHeadMixture point_head(const SuffStats& stats, const NigPrior& prior) {
  NigHeadMixture mix;
  mix.posteriors.push_back(nig_fit(stats, prior));
  Vector point(4);
  point << std::log(prior.alpha_w), std::log(prior.alpha_b), std::log(prior.a0),
      std::log(prior.b0);
  mix.summary = summarize_chain({point}, {"log_alpha_w", "log_alpha_b", "log_a0", "log_b0"});
  return mix;
}

}  // namespace nlb
