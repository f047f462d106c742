#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "nlb/common.hpp"
#include "nlb/linalg.hpp"
#include "nlb/rng.hpp"

// Fully-connected ReLU networks with hand-rolled reverse-mode gradients.
// The last layer is linear; the post-activations of the last hidden layer,
// augmented with a constant 1, form the feature map for the Bayesian heads.
namespace nlb::mlp {

struct Params {
  std::vector<int> layer_sizes;   // [d, h_1, ..., h_k, 1]
  std::vector<Matrix> weights;    // weights[l] is sizes[l] x sizes[l+1]
  std::vector<Vector> biases;     // biases[l] has sizes[l+1] entries

  int n_layers() const { return static_cast<int>(weights.size()); }
  int input_dim() const { return layer_sizes.front(); }
  // Width of the last hidden layer (N_L).
  int feature_dim() const { return layer_sizes[layer_sizes.size() - 2]; }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& w : weights) s += w.squaredNorm();
    for (const auto& b : biases) s += b.squaredNorm();
    return s;
  }
};

struct Grads {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static Grads zeros_like(const Params& p) {
    Grads g;
    for (const auto& w : p.weights) g.weights.push_back(Matrix::Zero(w.rows(), w.cols()));
    for (const auto& b : p.biases) g.biases.push_back(Vector::Zero(b.size()));
    return g;
  }

  void add_scaled(const Grads& other, double c) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] += c * other.weights[l];
      biases[l] += c * other.biases[l];
    }
  }
};

// Weights ~ N(0, 1/fan_in), biases zero; keeps pre-activations O(1) at
// initialization for 50-unit layers.
inline Params init_params(const std::vector<int>& layer_sizes, std::uint64_t seed) {
  Params p;
  p.layer_sizes = layer_sizes;
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const int fan_in = layer_sizes[l];
    const int fan_out = layer_sizes[l + 1];
    Matrix w(fan_in, fan_out);
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j) w(i, j) = rng.normal(0.0, sd);
    p.weights.push_back(std::move(w));
    p.biases.push_back(Vector::Zero(fan_out));
  }
  return p;
}

// Activations of every layer for one input batch. acts[0] is the input;
// acts[l+1] is the post-activation of layer l (the raw linear output for the
// final layer). The ReLU mask is recoverable from the post-activations since
// the derivative at exactly 0 is defined to be 0.
struct Trace {
  std::vector<Matrix> acts;
  const Matrix& features_raw() const { return acts[acts.size() - 2]; }
  const Matrix& output() const { return acts.back(); }
};

inline Trace forward_trace(const Params& p, const Matrix& x) {
  if (x.cols() != p.input_dim())
    throw DimensionMismatch("mlp: input width does not match first layer");
  Trace t;
  t.acts.reserve(p.n_layers() + 1);
  t.acts.push_back(x);
  for (int l = 0; l < p.n_layers(); ++l) {
    Matrix a = t.acts.back() * p.weights[l];
    a.rowwise() += p.biases[l].transpose();
    if (l + 1 < p.n_layers()) a = a.cwiseMax(0.0);
    t.acts.push_back(std::move(a));
  }
  return t;
}

// Post-activations of the last hidden layer with a constant-1 bias column
// appended: the N x (N_L + 1) design matrix of the Bayesian linear head.
inline Matrix forward_features(const Params& p, const Matrix& x) {
  Trace t = forward_trace(p, x);
  const Matrix& h = t.features_raw();
  Matrix phi(h.rows(), h.cols() + 1);
  phi.leftCols(h.cols()) = h;
  phi.col(h.cols()).setOnes();
  return phi;
}

inline Vector forward_output(const Params& p, const Matrix& x) {
  return forward_trace(p, x).output().col(0);
}

namespace detail {

inline void backprop_layers(const Params& p, const Trace& t, Matrix delta,
                            int from_layer, Grads& g) {
  // `delta` enters as dL/d(pre-activation) of layer `from_layer`.
  for (int l = from_layer; l >= 0; --l) {
    g.weights[l] = t.acts[l].transpose() * delta;
    g.biases[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      delta = (delta * p.weights[l].transpose()).eval();
      delta.array() *= (t.acts[l].array() > 0.0).cast<double>();
    }
  }
}

}  // namespace detail

// Gradients of a scalar objective w.r.t. every parameter, given the
// objective's gradient w.r.t. the network output.
inline Grads backprop_output(const Params& p, const Trace& t, const Vector& d_output) {
  if (d_output.size() != t.output().rows())
    throw ShapeMismatch("mlp: upstream output gradient has wrong length");
  Grads g = Grads::zeros_like(p);
  detail::backprop_layers(p, t, Matrix(d_output), p.n_layers() - 1, g);
  return g;
}

// Same, given the gradient w.r.t. the raw feature matrix (without the bias
// column, whose entries are constant). The output layer receives no gradient.
inline Grads backprop_features(const Params& p, const Trace& t, const Matrix& d_features) {
  const Matrix& h = t.features_raw();
  if (d_features.rows() != h.rows() || d_features.cols() != h.cols())
    throw ShapeMismatch("mlp: upstream feature gradient has wrong shape");
  Grads g = Grads::zeros_like(p);
  Matrix delta = d_features;
  delta.array() *= (h.array() > 0.0).cast<double>();
  detail::backprop_layers(p, t, std::move(delta), p.n_layers() - 2, g);
  return g;
}

// Bias-corrected ADAM. The update is a descent step; callers maximizing an
// objective negate its gradient.
struct AdamState {
  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;
  std::vector<Matrix> m_w, v_w;
  std::vector<Vector> m_b, v_b;

  static AdamState init(const Params& p, double lr) {
    AdamState s;
    s.lr = lr;
    for (const auto& w : p.weights) {
      s.m_w.push_back(Matrix::Zero(w.rows(), w.cols()));
      s.v_w.push_back(Matrix::Zero(w.rows(), w.cols()));
    }
    for (const auto& b : p.biases) {
      s.m_b.push_back(Vector::Zero(b.size()));
      s.v_b.push_back(Vector::Zero(b.size()));
    }
    return s;
  }
};

inline void adam_step(AdamState& s, Params& p, const Grads& g) {
  if (g.weights.size() != p.weights.size())
    throw ShapeMismatch("adam_step: gradient layer count mismatch");
  s.t += 1;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    if (g.weights[l].rows() != p.weights[l].rows() ||
        g.weights[l].cols() != p.weights[l].cols() ||
        g.biases[l].size() != p.biases[l].size())
      throw ShapeMismatch("adam_step: gradient shape mismatch");
    s.m_w[l] = s.beta1 * s.m_w[l] + (1.0 - s.beta1) * g.weights[l];
    s.v_w[l] = s.beta2 * s.v_w[l] + (1.0 - s.beta2) * g.weights[l].cwiseAbs2();
    p.weights[l].array() -=
        s.lr * (s.m_w[l].array() / c1) / ((s.v_w[l].array() / c2).sqrt() + s.eps);
    s.m_b[l] = s.beta1 * s.m_b[l] + (1.0 - s.beta1) * g.biases[l];
    s.v_b[l] = s.beta2 * s.v_b[l] + (1.0 - s.beta2) * g.biases[l].cwiseAbs2();
    p.biases[l].array() -=
        s.lr * (s.m_b[l].array() / c1) / ((s.v_b[l].array() / c2).sqrt() + s.eps);
  }
}

// ADAM for a single scalar (log-hyperparameters trained alongside a network).
struct ScalarAdam {
  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;
  double m = 0.0;
  double v = 0.0;

  // Returns the additive descent update for gradient `g`.
  double step(double g) {
    t += 1;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double mh = m / (1.0 - std::pow(beta1, static_cast<double>(t)));
    const double vh = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
    return -lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace nlb::mlp
