#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <variant>
#include <vector>

#include "nlb/bayes_linear.hpp"
#include "nlb/common.hpp"
#include "nlb/mlp.hpp"
#include "nlb/rng.hpp"

// The training regimes behind the model family: MAP (which also feeds the
// MAP NL head), regularized Type-2 MAP on the Gaussian evidence, and the two
// Bayesian-noise variants trained on the N-Gamma^{-1} evidence.
namespace nlb {

struct TrainData {
  Matrix x;
  Vector y;
  Index n() const { return x.rows(); }
};

struct MapConfig {
  double gamma = 0.5;
  double lr_weights = 1e-3;
  double lr_noise = 1e-3;
  int epochs = 0;
  int batch_size = 32;
};

struct RegConfig {
  double gamma_w = 0.5;
  double gamma_b = 0.5;
  double lr_theta = 1e-3;
  double lr_sigma = 1e-3;
  int epochs = 5000;
};

struct BnConfig {
  double lr = 1e-3;
  int max_epochs = 5000;
  NigPrior prior{1.0, 1.0, 1.0, 1.0};
  bool optimize_prior = true;  // BN(ML) learns the prior, BN(BO) keeps it fixed
};

struct GaussianHead {
  GaussianPrior prior;
};
struct NigHead {
  NigPrior prior;
};

struct TrainStats {
  std::vector<double> objective_trace;
  double val_ll = std::numeric_limits<double>::quiet_NaN();
  int best_epoch = -1;
};

struct TrainedModel {
  mlp::Params params;
  std::variant<GaussianHead, NigHead> head;
  TrainStats stats;
};

// L2 coefficient corresponding to a Gaussian prior with the given log
// variance, so weight decay stays interpretable as a prior choice.
inline double gamma_from_log_variance(double log_variance) {
  return 0.5 / std::exp(log_variance);
}

// Epochs needed for at least `min_steps` minibatch gradient steps.
inline int epochs_for_steps(Index n_train, int batch_size, int min_steps = 10000) {
  const int steps_per_epoch =
      static_cast<int>((n_train + batch_size - 1) / batch_size);
  return (min_steps + steps_per_epoch - 1) / steps_per_epoch;
}

// Hold out floor(n/5) points (half for the toy problem) by seeded permutation.
inline std::pair<TrainData, TrainData> split_validation(const TrainData& data,
                                                        std::uint64_t seed,
                                                        int denominator = 5) {
  const Index n = data.n();
  const Index n_val = n / denominator;
  std::vector<Index> perm(n);
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(derive_seed(seed, {0xa11ULL}));
  rng.shuffle(perm);
  TrainData train, val;
  train.x = Matrix(n - n_val, data.x.cols());
  train.y = Vector(n - n_val);
  val.x = Matrix(n_val, data.x.cols());
  val.y = Vector(n_val);
  for (Index i = 0; i < n_val; ++i) {
    val.x.row(i) = data.x.row(perm[i]);
    val.y(i) = data.y(perm[i]);
  }
  for (Index i = n_val; i < n; ++i) {
    train.x.row(i - n_val) = data.x.row(perm[i]);
    train.y(i - n_val) = data.y(perm[i]);
  }
  return {std::move(train), std::move(val)};
}

namespace detail {

inline void check_finite(double value, const char* what, int epoch) {
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << what << ": objective became non-finite at epoch " << epoch
        << " (value " << value << ")";
    throw NonFiniteObjective(msg.str());
  }
}

inline Matrix with_bias_column(const Matrix& h) {
  Matrix phi(h.rows(), h.cols() + 1);
  phi.leftCols(h.cols()) = h;
  phi.col(h.cols()).setOnes();
  return phi;
}

}  // namespace detail

// MAP objective on a minibatch, scaled to the full-dataset likelihood:
//   (N/B) sum_B log N(y_i; f_i, s2) - gamma ||theta_full||^2.
// Gradients are for maximization; callers negate for ADAM descent.
inline double map_objective(const mlp::Params& params, double log_sigma2,
                            const Matrix& x_batch, const Vector& y_batch,
                            Index n_total, double gamma, mlp::Grads* grads,
                            double* d_log_sigma2) {
  const double s2 = std::exp(log_sigma2);
  const Index b = x_batch.rows();
  const double scale = static_cast<double>(n_total) / static_cast<double>(b);
  mlp::Trace trace = mlp::forward_trace(params, x_batch);
  const Vector resid = y_batch - trace.output().col(0);
  double value = 0.0;
  for (Index i = 0; i < b; ++i) value += log_normal_pdf(y_batch(i), y_batch(i) - resid(i), s2);
  value *= scale;
  value -= gamma * params.squared_norm();

  if (grads) {
    const Vector d_out = scale * resid / s2;
    *grads = mlp::backprop_output(params, trace, d_out);
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
      grads->weights[l] -= 2.0 * gamma * params.weights[l];
      grads->biases[l] -= 2.0 * gamma * params.biases[l];
    }
  }
  if (d_log_sigma2) {
    *d_log_sigma2 =
        scale * (-0.5 * static_cast<double>(b) + 0.5 * resid.squaredNorm() / s2);
  }
  return value;
}

// Regularized Type-2 MAP objective (full batch):
//   L(theta, alpha, sigma2) - gamma_w ||theta_W||^2 - gamma_b ||theta_b||^2
// with the penalty on the feature layers only; the output layer plays no role
// in the evidence and stays untrained.
inline double reg_nl_objective(const mlp::Params& params, double log_alpha_w,
                               double log_alpha_b, double log_sigma2,
                               const TrainData& data, double gamma_w, double gamma_b,
                               mlp::Grads* grads, double* d_log_alpha_w,
                               double* d_log_alpha_b, double* d_log_sigma2) {
  mlp::Trace trace = mlp::forward_trace(params, data.x);
  const Matrix phi = detail::with_bias_column(trace.features_raw());
  const GaussianPrior prior{std::exp(log_alpha_w), std::exp(log_alpha_b),
                            std::exp(log_sigma2)};
  double value;
  if (grads || d_log_alpha_w || d_log_alpha_b || d_log_sigma2) {
    BlrEvidence ev = blr_log_marginal(phi, data.y, prior);
    value = ev.value;
    if (grads) {
      *grads = mlp::backprop_features(params, trace,
                                      ev.d_phi.leftCols(phi.cols() - 1));
      const int n_feature_layers = params.n_layers() - 1;
      for (int l = 0; l < n_feature_layers; ++l) {
        grads->weights[l] -= 2.0 * gamma_w * params.weights[l];
        grads->biases[l] -= 2.0 * gamma_b * params.biases[l];
      }
    }
    if (d_log_alpha_w) *d_log_alpha_w = ev.d_log_alpha_w;
    if (d_log_alpha_b) *d_log_alpha_b = ev.d_log_alpha_b;
    if (d_log_sigma2) *d_log_sigma2 = ev.d_log_sigma2;
  } else {
    value = blr_log_marginal_value(suff_stats(phi, data.y), prior);
  }
  double penalty = 0.0;
  for (int l = 0; l + 1 < params.n_layers(); ++l) {
    penalty += gamma_w * params.weights[l].squaredNorm();
    penalty += gamma_b * params.biases[l].squaredNorm();
  }
  return value - penalty;
}

// N-Gamma^{-1} evidence objective (full batch), optionally with gradients for
// the prior hyperparameters when they are trained jointly. `stats_out`, when
// given, receives the sufficient statistics of the current feature matrix so
// validation scoring can reuse them.
inline double bn_objective(const mlp::Params& params, const NigPrior& prior,
                           const TrainData& data, mlp::Grads* grads,
                           double* d_log_alpha_w, double* d_log_alpha_b,
                           double* d_log_a0, double* d_log_b0,
                           SuffStats* stats_out = nullptr) {
  mlp::Trace trace = mlp::forward_trace(params, data.x);
  const Matrix phi = detail::with_bias_column(trace.features_raw());
  if (stats_out) *stats_out = suff_stats(phi, data.y);
  if (!grads && !d_log_alpha_w && !d_log_alpha_b && !d_log_a0 && !d_log_b0)
    return stats_out ? nig_log_marginal_value(*stats_out, prior)
                     : nig_log_marginal_value(suff_stats(phi, data.y), prior);
  NigEvidence ev = nig_log_marginal(phi, data.y, prior);
  if (grads)
    *grads = mlp::backprop_features(params, trace, ev.d_phi.leftCols(phi.cols() - 1));
  if (d_log_alpha_w) *d_log_alpha_w = ev.d_log_alpha_w;
  if (d_log_alpha_b) *d_log_alpha_b = ev.d_log_alpha_b;
  if (d_log_a0) *d_log_a0 = ev.d_log_a0;
  if (d_log_b0) *d_log_b0 = ev.d_log_b0;
  return ev.value;
}

// Mean validation log likelihood of a fitted head on held-out points (all in
// standardized units; the argmax is unchanged by the unit conversion).
inline double validation_ll_gaussian(const mlp::Params& params, const TrainData& train,
                                     const TrainData& val, const GaussianPrior& prior) {
  const Matrix phi = mlp::forward_features(params, train.x);
  GaussianBlrPosterior post = blr_fit(suff_stats(phi, train.y), prior);
  const Matrix phi_val = mlp::forward_features(params, val.x);
  double ll = 0.0;
  for (Index i = 0; i < val.n(); ++i)
    ll += blr_predict(post, phi_val.row(i)).log_density(val.y(i));
  return ll / static_cast<double>(val.n());
}

inline double validation_ll_nig(const mlp::Params& params, const TrainData& train,
                                const TrainData& val, const NigPrior& prior) {
  const Matrix phi = mlp::forward_features(params, train.x);
  NigPosterior post = nig_fit(suff_stats(phi, train.y), prior);
  const Matrix phi_val = mlp::forward_features(params, val.x);
  double ll = 0.0;
  for (Index i = 0; i < val.n(); ++i)
    ll += nig_predict(post, phi_val.row(i)).log_density(val.y(i));
  return ll / static_cast<double>(val.n());
}

inline double validation_ll_map(const mlp::Params& params, double sigma2,
                                const TrainData& val) {
  const Vector out = mlp::forward_output(params, val.x);
  double ll = 0.0;
  for (Index i = 0; i < val.n(); ++i)
    ll += log_normal_pdf(val.y(i), out(i), sigma2);
  return ll / static_cast<double>(val.n());
}

// Minibatch ADAM over theta_full and log sigma2. The returned head carries
// alpha_w = 1/50, alpha_b = 1 (the slice-sampling initialization) and the
// trained noise variance.
inline TrainedModel train_map(const TrainData& train, const TrainData& val,
                              const MapConfig& config,
                              const std::vector<int>& layer_sizes,
                              std::uint64_t seed) {
  TrainedModel model;
  model.params = mlp::init_params(layer_sizes, derive_seed(seed, {1}));
  double log_s2 = -3.0;

  mlp::AdamState adam = mlp::AdamState::init(model.params, config.lr_weights);
  mlp::ScalarAdam noise_adam{.lr = config.lr_noise};
  Rng shuffle_rng(derive_seed(seed, {2}));

  std::vector<Index> order(train.n());
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_value = 0.0;
    int n_batches = 0;
    for (Index start = 0; start < train.n(); start += config.batch_size) {
      const Index b = std::min<Index>(config.batch_size, train.n() - start);
      Matrix xb(b, train.x.cols());
      Vector yb(b);
      for (Index i = 0; i < b; ++i) {
        xb.row(i) = train.x.row(order[start + i]);
        yb(i) = train.y(order[start + i]);
      }
      mlp::Grads grads;
      double d_log_s2 = 0.0;
      const double value = map_objective(model.params, log_s2, xb, yb, train.n(),
                                         config.gamma, &grads, &d_log_s2);
      detail::check_finite(value, "train_map", epoch);
      // Maximization: descend on the negated gradients.
      for (auto& w : grads.weights) w = -w;
      for (auto& b2 : grads.biases) b2 = -b2;
      mlp::adam_step(adam, model.params, grads);
      log_s2 += noise_adam.step(-d_log_s2);
      epoch_value += value;
      ++n_batches;
    }
    model.stats.objective_trace.push_back(epoch_value / std::max(1, n_batches));
  }

  const double sigma2 = std::exp(log_s2);
  model.head = GaussianHead{GaussianPrior{1.0 / 50.0, 1.0, sigma2}};
  if (val.n() > 0) model.stats.val_ll = validation_ll_map(model.params, sigma2, val);
  return model;
}

// Full-batch ADAM jointly over theta and (log alpha_w, log alpha_b,
// log sigma2), maximizing the regularized Gaussian evidence. One epoch is one
// gradient step.
inline TrainedModel train_reg_nl(const TrainData& train, const TrainData& val,
                                 const RegConfig& config,
                                 const std::vector<int>& layer_sizes,
                                 std::uint64_t seed) {
  TrainedModel model;
  model.params = mlp::init_params(layer_sizes, derive_seed(seed, {1}));
  double log_aw = std::log(1.0 / 50.0);
  double log_ab = 0.0;
  double log_s2 = -3.0;

  mlp::AdamState adam = mlp::AdamState::init(model.params, config.lr_theta);
  mlp::ScalarAdam aw_adam{.lr = config.lr_sigma};
  mlp::ScalarAdam ab_adam{.lr = config.lr_sigma};
  mlp::ScalarAdam s2_adam{.lr = config.lr_sigma};

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    mlp::Grads grads;
    double d_aw = 0.0, d_ab = 0.0, d_s2 = 0.0;
    const double value =
        reg_nl_objective(model.params, log_aw, log_ab, log_s2, train,
                         config.gamma_w, config.gamma_b, &grads, &d_aw, &d_ab, &d_s2);
    detail::check_finite(value, "train_reg_nl", epoch);
    for (auto& w : grads.weights) w = -w;
    for (auto& b : grads.biases) b = -b;
    mlp::adam_step(adam, model.params, grads);
    log_aw += aw_adam.step(-d_aw);
    log_ab += ab_adam.step(-d_ab);
    log_s2 += s2_adam.step(-d_s2);
    model.stats.objective_trace.push_back(value);
  }

  model.head = GaussianHead{
      GaussianPrior{std::exp(log_aw), std::exp(log_ab), std::exp(log_s2)}};
  if (val.n() > 0)
    model.stats.val_ll = validation_ll_gaussian(
        model.params, train, val, std::get<GaussianHead>(model.head).prior);
  return model;
}

// Pluggable validation scorer: epoch index plus the current state.
using BnValScorer =
    std::function<double(int epoch, const mlp::Params&, const NigPrior&)>;

// Full-batch ADAM maximizing the N-Gamma^{-1} evidence over theta (and the
// prior hyperparameters when optimize_prior is set). The validation log
// likelihood is evaluated every epoch (including epoch 0, the untrained
// network) and the best-scoring snapshot is returned. Without a validation
// set the final epoch is returned.
inline TrainedModel train_bn(const TrainData& train, const TrainData& val,
                             const BnConfig& config,
                             const std::vector<int>& layer_sizes, std::uint64_t seed,
                             const BnValScorer& scorer_override = nullptr) {
  TrainedModel model;
  model.params = mlp::init_params(layer_sizes, derive_seed(seed, {1}));
  double log_aw = std::log(config.prior.alpha_w);
  double log_ab = std::log(config.prior.alpha_b);
  double log_a0 = std::log(config.prior.a0);
  double log_b0 = std::log(config.prior.b0);

  const bool track = scorer_override || val.n() > 0;

  mlp::AdamState adam = mlp::AdamState::init(model.params, config.lr);
  mlp::ScalarAdam aw_adam{.lr = config.lr}, ab_adam{.lr = config.lr},
      a0_adam{.lr = config.lr}, b0_adam{.lr = config.lr};

  auto current_prior = [&] {
    return NigPrior{std::exp(log_aw), std::exp(log_ab), std::exp(log_a0),
                    std::exp(log_b0)};
  };
  // Fast per-epoch validation score reusing the training pass' sufficient
  // statistics (the posterior fit is O(M^3), plus one forward on val).
  auto fast_score = [&](const SuffStats& stats, const NigPrior& prior) {
    NigPosterior post = nig_fit(stats, prior);
    const Matrix phi_val = mlp::forward_features(model.params, val.x);
    double ll = 0.0;
    for (Index i = 0; i < val.n(); ++i)
      ll += nig_predict(post, phi_val.row(i)).log_density(val.y(i));
    return ll / static_cast<double>(val.n());
  };

  mlp::Params best_params = model.params;
  NigPrior best_prior = current_prior();
  double best_val = -std::numeric_limits<double>::infinity();
  int best_epoch = 0;

  // Each loop iteration scores the pre-update state (epoch = number of ADAM
  // steps applied so far, so epoch 0 is the initialization), then steps.
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    mlp::Grads grads;
    double d_aw = 0.0, d_ab = 0.0, d_a0 = 0.0, d_b0 = 0.0;
    SuffStats stats;
    const double value =
        bn_objective(model.params, current_prior(), train, &grads,
                     config.optimize_prior ? &d_aw : nullptr,
                     config.optimize_prior ? &d_ab : nullptr,
                     config.optimize_prior ? &d_a0 : nullptr,
                     config.optimize_prior ? &d_b0 : nullptr,
                     track && !scorer_override ? &stats : nullptr);
    detail::check_finite(value, "train_bn", epoch);
    if (track) {
      const double v = scorer_override
                           ? scorer_override(epoch, model.params, current_prior())
                           : fast_score(stats, current_prior());
      if (v > best_val) {
        best_val = v;
        best_params = model.params;
        best_prior = current_prior();
        best_epoch = epoch;
      }
    }
    for (auto& w : grads.weights) w = -w;
    for (auto& b : grads.biases) b = -b;
    mlp::adam_step(adam, model.params, grads);
    if (config.optimize_prior) {
      log_aw += aw_adam.step(-d_aw);
      log_ab += ab_adam.step(-d_ab);
      log_a0 += a0_adam.step(-d_a0);
      log_b0 += b0_adam.step(-d_b0);
    }
    model.stats.objective_trace.push_back(value);
  }
  if (track) {
    const double v = scorer_override
                         ? scorer_override(config.max_epochs, model.params,
                                           current_prior())
                         : validation_ll_nig(model.params, train, val, current_prior());
    if (v > best_val) {
      best_val = v;
      best_params = model.params;
      best_prior = current_prior();
      best_epoch = config.max_epochs;
    }
  }

  if (track) {
    model.params = std::move(best_params);
    model.head = NigHead{best_prior};
    model.stats.val_ll = best_val;
    model.stats.best_epoch = best_epoch;
  } else {
    model.head = NigHead{current_prior()};
    model.stats.best_epoch = config.max_epochs;
  }
  return model;
}

// BN(ML) learning-rate selection: 10 rates spaced logarithmically over
// [1e-4, 1e-2]; entries whose training diverges are skipped.
inline std::vector<double> lr_grid() {
  std::vector<double> g;
  for (int i = 0; i < 10; ++i) g.push_back(std::pow(10.0, -4.0 + 2.0 * i / 9.0));
  return g;
}

using BnTrainer = std::function<TrainedModel(
    const TrainData&, const TrainData&, const BnConfig&, const std::vector<int>&,
    std::uint64_t)>;

inline std::pair<TrainedModel, double> select_lr_grid(
    const TrainData& train, const TrainData& val, const BnConfig& config,
    const std::vector<int>& layer_sizes, std::uint64_t seed,
    const BnTrainer& trainer_override = nullptr) {
  const BnTrainer trainer =
      trainer_override ? trainer_override
                       : [](const TrainData& tr, const TrainData& va, const BnConfig& c,
                            const std::vector<int>& sizes, std::uint64_t s) {
                           return train_bn(tr, va, c, sizes, s);
                         };
  std::optional<TrainedModel> best;
  double best_lr = 0.0;
  for (double lr : lr_grid()) {
    BnConfig c = config;
    c.lr = lr;
    try {
      TrainedModel m = trainer(train, val, c, layer_sizes, seed);
      if (!std::isfinite(m.stats.val_ll)) continue;
      if (!best || m.stats.val_ll > best->stats.val_ll) {
        best = std::move(m);
        best_lr = lr;
      }
    } catch (const NonFiniteObjective&) {
      continue;  // divergent entry: skip, keep the rest of the grid
    }
  }
  if (!best)
    throw NonFiniteObjective("select_lr_grid: every learning rate diverged");
  return {std::move(*best), best_lr};
}

}  // namespace nlb
