#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "nlb/common.hpp"
#include "nlb/mlp.hpp"
#include "nlb/predictive.hpp"
#include "nlb/rng.hpp"
#include "nlb/special.hpp"
#include "nlb/training.hpp"

// Comparison models trained without hyperparameter tuning: mean-field
// variational inference with the local reparameterization trick, and Monte
// Carlo dropout.
namespace nlb::baselines {

// ---------------------------------------------------------------------------
// MFVI
// ---------------------------------------------------------------------------

struct MfviConfig {
  int steps = 25000;
  int batch_size = 32;
  int n_grad_samples = 10;     // posterior samples per gradient step
  int n_predict_samples = 100; // posterior samples at test time
  double lr = 1e-3;
};

// Factorized Gaussian posterior over every weight and bias. Means and
// log-stds are stored as two parameter structures of identical shape; the
// observation noise is a learned point estimate.
struct MfviParams {
  mlp::Params mu;
  mlp::Params log_std;
  double log_sigma2 = -3.0;

  int n_layers() const { return mu.n_layers(); }
};

inline MfviParams mfvi_init(const std::vector<int>& layer_sizes, std::uint64_t seed) {
  MfviParams p;
  p.mu = mlp::init_params(layer_sizes, derive_seed(seed, {1}));
  p.log_std = p.mu;
  for (auto& w : p.log_std.weights) w.setConstant(-5.0);
  for (auto& b : p.log_std.biases) b.setConstant(-5.0);
  return p;
}

// KL(q || N(0, I)) for the whole factorized posterior:
// sum 1/2 (mu^2 + s^2 - 1 - log s^2).
inline double kl_gauss_diag(double mu, double sigma2) {
  return 0.5 * (mu * mu + sigma2 - 1.0 - std::log(sigma2));
}

inline double kl_to_standard_normal(const MfviParams& p) {
  double kl = 0.0;
  for (std::size_t l = 0; l < p.mu.weights.size(); ++l) {
    const auto& m = p.mu.weights[l];
    const auto& r = p.log_std.weights[l];
    for (Index i = 0; i < m.size(); ++i)
      kl += kl_gauss_diag(*(m.data() + i), std::exp(2.0 * *(r.data() + i)));
    const auto& mb = p.mu.biases[l];
    const auto& rb = p.log_std.biases[l];
    for (Index i = 0; i < mb.size(); ++i)
      kl += kl_gauss_diag(mb(i), std::exp(2.0 * rb(i)));
  }
  return kl;
}

// Pre-drawn per-sample, per-layer activation noise so that objective
// evaluations can share common random numbers (the gradient test holds the
// noise fixed while differencing).
struct MfviNoise {
  std::vector<std::vector<Matrix>> eps;  // [sample][layer] of batch x out
};

inline MfviNoise mfvi_draw_noise(const std::vector<int>& layer_sizes, Index batch,
                                 int n_samples, Rng& rng) {
  MfviNoise noise;
  noise.eps.resize(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
      Matrix e(batch, layer_sizes[l + 1]);
      for (Index i = 0; i < e.size(); ++i) *(e.data() + i) = rng.normal();
      noise.eps[s].push_back(std::move(e));
    }
  }
  return noise;
}

struct MfviGrads {
  mlp::Grads mu;
  mlp::Grads log_std;
  double d_log_sigma2 = 0.0;
};

// Per-batch objective with the minibatch KL scaling batch/N:
//   (1/S) sum_s sum_i log N(y_i; out_i^s, s2) - (B/N) KL(q || prior).
// Pre-activations are sampled, not weights: for each layer the activation
// a = m + sqrt(v) eps with m = H mu + b_mu and v = H^2 s2_w + s2_b.
inline double mfvi_objective(const MfviParams& p, const Matrix& x, const Vector& y,
                             Index n_total, const MfviNoise& noise,
                             MfviGrads* grads) {
  const int n_samples = static_cast<int>(noise.eps.size());
  const int n_layers = p.n_layers();
  const Index batch = x.rows();
  const double s2 = std::exp(p.log_sigma2);

  if (grads) {
    grads->mu = mlp::Grads::zeros_like(p.mu);
    grads->log_std = mlp::Grads::zeros_like(p.log_std);
    grads->d_log_sigma2 = 0.0;
  }

  double total_ll = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    // Forward with local reparameterization, keeping what backward needs.
    std::vector<Matrix> acts(n_layers + 1);   // post-activation inputs per layer
    std::vector<Matrix> stds(n_layers);       // sqrt(v) per layer
    acts[0] = x;
    for (int l = 0; l < n_layers; ++l) {
      const Matrix h2 = acts[l].cwiseAbs2();
      Matrix svar_w = (2.0 * p.log_std.weights[l].array()).exp();
      Vector svar_b = (2.0 * p.log_std.biases[l].array()).exp();
      Matrix m = acts[l] * p.mu.weights[l];
      m.rowwise() += p.mu.biases[l].transpose();
      Matrix v = h2 * svar_w;
      v.rowwise() += svar_b.transpose();
      stds[l] = v.cwiseSqrt();
      Matrix a = m + stds[l].cwiseProduct(noise.eps[s][l]);
      acts[l + 1] = (l + 1 < n_layers) ? a.cwiseMax(0.0) : a;
    }

    const Vector out = acts[n_layers].col(0);
    for (Index i = 0; i < batch; ++i)
      total_ll += log_normal_pdf(y(i), out(i), s2);

    if (!grads) continue;
    const Vector resid = y - out;
    grads->d_log_sigma2 +=
        -0.5 * static_cast<double>(batch) + 0.5 * resid.squaredNorm() / s2;

    // Backward through the sampled pre-activations.
    Matrix delta = Matrix(resid / s2);  // dL/da at the output layer
    for (int l = n_layers - 1; l >= 0; --l) {
      const Matrix& h = acts[l];
      const Matrix h2 = h.cwiseAbs2();
      // d m and d v
      const Matrix d_v =
          delta.cwiseProduct(noise.eps[s][l]).cwiseQuotient(2.0 * stds[l]);
      grads->mu.weights[l] += h.transpose() * delta;
      grads->mu.biases[l] += delta.colwise().sum().transpose();
      const Matrix svar_w = (2.0 * p.log_std.weights[l].array()).exp().matrix();
      const Vector svar_b = (2.0 * p.log_std.biases[l].array()).exp().matrix();
      // dL/d s2_w = H^2' d_v, then d s2 / d log_std = 2 s2
      grads->log_std.weights[l] +=
          2.0 * svar_w.cwiseProduct(h2.transpose() * d_v);
      grads->log_std.biases[l] +=
          2.0 * svar_b.cwiseProduct(d_v.colwise().sum().transpose());
      if (l > 0) {
        Matrix d_h = delta * p.mu.weights[l].transpose() +
                     2.0 * h.cwiseProduct(d_v * svar_w.transpose());
        d_h.array() *= (h.array() > 0.0).cast<double>();
        delta = std::move(d_h);
      }
    }
  }

  const double inv_s = 1.0 / static_cast<double>(n_samples);
  const double kl_scale = static_cast<double>(batch) / static_cast<double>(n_total);
  const double kl = kl_to_standard_normal(p);
  const double value = total_ll * inv_s - kl_scale * kl;

  if (grads) {
    for (int l = 0; l < n_layers; ++l) {
      grads->mu.weights[l] *= inv_s;
      grads->mu.biases[l] *= inv_s;
      grads->log_std.weights[l] *= inv_s;
      grads->log_std.biases[l] *= inv_s;
      // KL gradients: d/dmu = mu, d/dlog_std = s2 - 1.
      grads->mu.weights[l] -= kl_scale * p.mu.weights[l];
      grads->mu.biases[l] -= kl_scale * p.mu.biases[l];
      grads->log_std.weights[l] -=
          kl_scale * ((2.0 * p.log_std.weights[l].array()).exp() - 1.0).matrix();
      grads->log_std.biases[l] -=
          kl_scale * ((2.0 * p.log_std.biases[l].array()).exp() - 1.0).matrix();
    }
    grads->d_log_sigma2 *= inv_s;
  }
  return value;
}

inline MfviParams mfvi_train(const TrainData& data, const std::vector<int>& layer_sizes,
                             const MfviConfig& config, std::uint64_t seed) {
  MfviParams p = mfvi_init(layer_sizes, seed);
  mlp::AdamState mu_adam = mlp::AdamState::init(p.mu, config.lr);
  mlp::AdamState std_adam = mlp::AdamState::init(p.log_std, config.lr);
  mlp::ScalarAdam noise_adam{.lr = config.lr};
  Rng rng(derive_seed(seed, {2}));

  std::vector<Index> order(data.n());
  std::iota(order.begin(), order.end(), Index{0});
  Index cursor = data.n();  // forces an initial shuffle
  for (int step = 0; step < config.steps; ++step) {
    if (cursor >= data.n()) {
      rng.shuffle(order);
      cursor = 0;
    }
    const Index b = std::min<Index>(config.batch_size, data.n() - cursor);
    Matrix xb(b, data.x.cols());
    Vector yb(b);
    for (Index i = 0; i < b; ++i) {
      xb.row(i) = data.x.row(order[cursor + i]);
      yb(i) = data.y(order[cursor + i]);
    }
    cursor += b;

    MfviNoise noise = mfvi_draw_noise(layer_sizes, b, config.n_grad_samples, rng);
    MfviGrads grads;
    const double value = mfvi_objective(p, xb, yb, data.n(), noise, &grads);
    if (!std::isfinite(value))
      throw NonFiniteObjective("mfvi_train: ELBO became non-finite");
    for (auto& w : grads.mu.weights) w = -w;
    for (auto& bb : grads.mu.biases) bb = -bb;
    for (auto& w : grads.log_std.weights) w = -w;
    for (auto& bb : grads.log_std.biases) bb = -bb;
    mlp::adam_step(mu_adam, p.mu, grads.mu);
    mlp::adam_step(std_adam, p.log_std, grads.log_std);
    p.log_sigma2 += noise_adam.step(-grads.d_log_sigma2);
  }
  return p;
}

// Draw one concrete network from the posterior.
inline mlp::Params mfvi_sample_network(const MfviParams& p, Rng& rng) {
  mlp::Params net = p.mu;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    for (Index i = 0; i < net.weights[l].size(); ++i)
      *(net.weights[l].data() + i) +=
          std::exp(*(p.log_std.weights[l].data() + i)) * rng.normal();
    for (Index i = 0; i < net.biases[l].size(); ++i)
      net.biases[l](i) += std::exp(p.log_std.biases[l](i)) * rng.normal();
  }
  return net;
}

// Per-point predictive mixtures from n posterior samples; each component is
// N(f_w(x), sigma2) with the learned observation noise.
inline std::vector<PredictiveMixture> mfvi_predict(const MfviParams& p,
                                                   const Matrix& x, int n_samples,
                                                   Rng& rng) {
  const double s2 = std::exp(p.log_sigma2);
  Matrix means(n_samples, x.rows());
  for (int s = 0; s < n_samples; ++s) {
    mlp::Params net = mfvi_sample_network(p, rng);
    means.row(s) = mlp::forward_output(net, x).transpose();
  }
  std::vector<PredictiveMixture> out;
  out.reserve(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    std::vector<GaussianPredictive> comps;
    comps.reserve(n_samples);
    for (int s = 0; s < n_samples; ++s) comps.push_back({means(s, i), s2});
    out.push_back(PredictiveMixture{std::move(comps)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo dropout
// ---------------------------------------------------------------------------

struct McdConfig {
  int steps = 25000;
  int batch_size = 32;
  double lr = 1e-3;
  double dropout_p = 0.05;
  int n_predict_samples = 100;
};

struct McdParams {
  mlp::Params params;
  double dropout_p = 0.05;
  double log_sigma2 = -3.0;
};

// Unity-prior-variance weight decay on the per-point-averaged objective.
inline double mcd_weight_decay(double dropout_p, Index n_train) {
  return (1.0 - dropout_p) / (2.0 * static_cast<double>(n_train));
}

// Bernoulli(1-p) masks on the hidden post-activations (no rescaling; test
// time uses the same stochastic forward).
inline Vector mcd_forward(const mlp::Params& params, const Matrix& x, double p,
                          Rng& rng, std::vector<Matrix>* acts_out = nullptr,
                          std::vector<Matrix>* masks_out = nullptr) {
  const int n_layers = params.n_layers();
  std::vector<Matrix> acts(n_layers + 1);
  std::vector<Matrix> masks(std::max(0, n_layers - 1));
  acts[0] = x;
  for (int l = 0; l < n_layers; ++l) {
    Matrix a = acts[l] * params.weights[l];
    a.rowwise() += params.biases[l].transpose();
    if (l + 1 < n_layers) {
      a = a.cwiseMax(0.0);
      Matrix mask(a.rows(), a.cols());
      for (Index i = 0; i < mask.size(); ++i)
        *(mask.data() + i) = rng.bernoulli(1.0 - p) ? 1.0 : 0.0;
      a = a.cwiseProduct(mask);
      masks[l] = std::move(mask);
    }
    acts[l + 1] = std::move(a);
  }
  Vector out = acts[n_layers].col(0);
  if (acts_out) *acts_out = std::move(acts);
  if (masks_out) *masks_out = std::move(masks);
  return out;
}

inline McdParams mcd_train(const TrainData& data, const std::vector<int>& layer_sizes,
                           const McdConfig& config, std::uint64_t seed) {
  McdParams p;
  p.params = mlp::init_params(layer_sizes, derive_seed(seed, {1}));
  p.dropout_p = config.dropout_p;
  const double lam_w = mcd_weight_decay(config.dropout_p, data.n());
  const double lam_b = 1.0 / (2.0 * static_cast<double>(data.n()));

  mlp::AdamState adam = mlp::AdamState::init(p.params, config.lr);
  mlp::ScalarAdam noise_adam{.lr = config.lr};
  Rng rng(derive_seed(seed, {2}));

  std::vector<Index> order(data.n());
  std::iota(order.begin(), order.end(), Index{0});
  Index cursor = data.n();
  for (int step = 0; step < config.steps; ++step) {
    if (cursor >= data.n()) {
      rng.shuffle(order);
      cursor = 0;
    }
    const Index b = std::min<Index>(config.batch_size, data.n() - cursor);
    Matrix xb(b, data.x.cols());
    Vector yb(b);
    for (Index i = 0; i < b; ++i) {
      xb.row(i) = data.x.row(order[cursor + i]);
      yb(i) = data.y(order[cursor + i]);
    }
    cursor += b;

    std::vector<Matrix> acts, masks;
    const double s2 = std::exp(p.log_sigma2);
    const Vector out = mcd_forward(p.params, xb, config.dropout_p, rng, &acts, &masks);
    const Vector resid = yb - out;
    double value = 0.0;
    for (Index i = 0; i < b; ++i) value += log_normal_pdf(yb(i), out(i), s2);
    value /= static_cast<double>(b);
    for (std::size_t l = 0; l < p.params.weights.size(); ++l) {
      value -= lam_w * p.params.weights[l].squaredNorm();
      value -= lam_b * p.params.biases[l].squaredNorm();
    }
    if (!std::isfinite(value))
      throw NonFiniteObjective("mcd_train: objective became non-finite");

    // Backprop: masked post-activations, mean-scaled likelihood.
    const int n_layers = p.params.n_layers();
    mlp::Grads grads = mlp::Grads::zeros_like(p.params);
    Matrix delta = Matrix(resid / (s2 * static_cast<double>(b)));
    for (int l = n_layers - 1; l >= 0; --l) {
      grads.weights[l] = acts[l].transpose() * delta;
      grads.biases[l] = delta.colwise().sum().transpose();
      if (l > 0) {
        delta = (delta * p.params.weights[l].transpose()).eval();
        delta = delta.cwiseProduct(masks[l - 1]);  // masked units pass nothing
        // acts[l] is already masked; positive entries mark active ReLU units.
        delta.array() *= (acts[l].array() > 0.0).cast<double>();
      }
    }
    for (std::size_t l = 0; l < grads.weights.size(); ++l) {
      grads.weights[l] -= 2.0 * lam_w * p.params.weights[l];
      grads.biases[l] -= 2.0 * lam_b * p.params.biases[l];
      grads.weights[l] = -grads.weights[l];
      grads.biases[l] = -grads.biases[l];
    }
    mlp::adam_step(adam, p.params, grads);
    const double d_ls2 =
        (-0.5 * static_cast<double>(b) + 0.5 * resid.squaredNorm() / s2) /
        static_cast<double>(b);
    p.log_sigma2 += noise_adam.step(-d_ls2);
  }
  return p;
}

inline std::vector<PredictiveMixture> mcd_predict(const McdParams& p, const Matrix& x,
                                                  int n_samples, Rng& rng) {
  const double s2 = std::exp(p.log_sigma2);
  Matrix means(n_samples, x.rows());
  for (int s = 0; s < n_samples; ++s)
    means.row(s) = mcd_forward(p.params, x, p.dropout_p, rng).transpose();
  std::vector<PredictiveMixture> out;
  out.reserve(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    std::vector<GaussianPredictive> comps;
    comps.reserve(n_samples);
    for (int s = 0; s < n_samples; ++s) comps.push_back({means(s, i), s2});
    out.push_back(PredictiveMixture{std::move(comps)});
  }
  return out;
}

}  // namespace nlb::baselines
