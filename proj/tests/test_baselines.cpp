#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "nlb/baselines.hpp"
#include "nlb/data.hpp"
#include "support/oracles.hpp"

using namespace nlb;
using namespace nlb::baselines;
using Catch::Approx;

namespace {

TrainData small_data(Index n, std::uint64_t seed) {
  Rng rng(seed);
  TrainData d;
  d.x = Matrix(n, 1);
  d.y = Vector(n);
  for (Index i = 0; i < n; ++i) {
    d.x(i, 0) = rng.uniform(-1.0, 1.0);
    d.y(i) = std::sin(2.0 * d.x(i, 0)) + 0.2 * rng.normal();
  }
  return d;
}

TrainData standardized_toy(std::uint64_t seed) {
  auto [train, test] = toy_dataset(seed);
  Standardizer s = Standardizer::fit(train.x, train.y);
  return {s.apply_x(train.x), s.apply_y(train.y)};
}

}  // namespace

TEST_CASE("kl_gauss_diag reference values and nonnegativity") {
  CHECK(kl_gauss_diag(0.0, 1.0) == 0.0);
  CHECK(kl_gauss_diag(1.0, 1.0) == Approx(0.5));
  Rng rng(81);
  for (int i = 0; i < 300; ++i) {
    const double kl = kl_gauss_diag(rng.normal(), std::exp(rng.uniform(-4.0, 3.0)));
    REQUIRE(kl >= 0.0);
  }
}

TEST_CASE("kl of the whole posterior is zero at the prior") {
  MfviParams p = mfvi_init({2, 3, 1}, 1);
  for (auto& w : p.mu.weights) w.setZero();
  for (auto& w : p.log_std.weights) w.setZero();  // sigma = 1
  for (auto& b : p.log_std.biases) b.setZero();
  REQUIRE(kl_to_standard_normal(p) == Approx(0.0).margin(1e-14));
}

TEST_CASE("mfvi: zero steps returns the initialization") {
  TrainData d = small_data(16, 2);
  MfviConfig cfg;
  cfg.steps = 0;
  MfviParams p = mfvi_train(d, {1, 4, 1}, cfg, 3);
  MfviParams init = mfvi_init({1, 4, 1}, 3);
  REQUIRE(p.mu.weights[0] == init.mu.weights[0]);
  for (const auto& w : p.log_std.weights) REQUIRE((w.array() == -5.0).all());
  REQUIRE(p.log_sigma2 == -3.0);
}

TEST_CASE("mfvi ELBO gradients match finite differences under common random numbers") {
  TrainData d = small_data(6, 4);
  MfviParams p = mfvi_init({1, 1, 1}, 5);
  // Move away from the deterministic-start corner so variance terms matter.
  for (auto& w : p.log_std.weights) w.setConstant(-0.7);
  for (auto& b : p.log_std.biases) b.setConstant(-1.1);
  p.mu.weights[0](0, 0) = 0.8;
  p.mu.weights[1](0, 0) = -0.6;
  p.mu.biases[0](0) = 0.3;
  p.log_sigma2 = -0.9;

  Rng rng(6);
  MfviNoise noise = mfvi_draw_noise({1, 1, 1}, d.n(), 4, rng);
  MfviGrads grads;
  mfvi_objective(p, d.x, d.y, d.n(), noise, &grads);
  auto value = [&](const MfviParams& q) {
    return mfvi_objective(q, d.x, d.y, d.n(), noise, nullptr);
  };

  const double h = 1e-6;
  auto check_coord = [&](double* coord, double got) {
    const double orig = *coord;
    *coord = orig + h;
    const double up = value(p);
    *coord = orig - h;
    const double dn = value(p);
    *coord = orig;
    const double fd = (up - dn) / (2.0 * h);
    CHECK(got == Approx(fd).epsilon(1e-4).margin(1e-7));
  };
  MfviParams& q = p;
  check_coord(q.mu.weights[0].data(), grads.mu.weights[0](0, 0));
  check_coord(q.mu.weights[1].data(), grads.mu.weights[1](0, 0));
  check_coord(q.mu.biases[0].data(), grads.mu.biases[0](0));
  check_coord(q.mu.biases[1].data(), grads.mu.biases[1](0));
  check_coord(q.log_std.weights[0].data(), grads.log_std.weights[0](0, 0));
  check_coord(q.log_std.weights[1].data(), grads.log_std.weights[1](0, 0));
  check_coord(q.log_std.biases[0].data(), grads.log_std.biases[0](0));
  check_coord(q.log_std.biases[1].data(), grads.log_std.biases[1](0));
  check_coord(&q.log_sigma2, grads.d_log_sigma2);
}

TEST_CASE("local reparameterization matches weight-space sampling moments") {
  // Single linear layer: pre-activation for input row h has mean h mu + b_mu
  // and variance h^2 s2_w + s2_b under both sampling schemes; compare the
  // empirical local-reparameterization moments over 1e4 draws.
  Rng rng(7);
  const Index in = 3;
  Vector h(in);
  h << 0.5, -1.2, 2.0;
  Vector mu(in), logstd(in);
  for (Index i = 0; i < in; ++i) {
    mu(i) = rng.normal();
    logstd(i) = rng.uniform(-1.5, 0.0);
  }
  const double b_mu = 0.4, b_logstd = -0.8;

  const double expect_mean = h.dot(mu) + b_mu;
  double expect_var = std::exp(2.0 * b_logstd);
  for (Index i = 0; i < in; ++i)
    expect_var += h(i) * h(i) * std::exp(2.0 * logstd(i));

  const int draws = 10000;
  double acc = 0.0, acc2 = 0.0;
  for (int t = 0; t < draws; ++t) {
    const double a =
        expect_mean + std::sqrt(expect_var) * rng.normal();  // local reparam
    acc += a;
    acc2 += a * a;
  }
  double acc_w = 0.0, acc2_w = 0.0;
  for (int t = 0; t < draws; ++t) {
    double a = b_mu + std::exp(b_logstd) * rng.normal();  // weight-space
    for (Index i = 0; i < in; ++i)
      a += h(i) * (mu(i) + std::exp(logstd(i)) * rng.normal());
    acc_w += a;
    acc2_w += a * a;
  }
  const double mean_l = acc / draws, var_l = acc2 / draws - mean_l * mean_l;
  const double mean_w = acc_w / draws, var_w = acc2_w / draws - mean_w * mean_w;
  REQUIRE(mean_l == Approx(mean_w).margin(0.02 * std::sqrt(expect_var) * 3));
  REQUIRE(var_l == Approx(var_w).epsilon(0.05));
  REQUIRE(var_l == Approx(expect_var).epsilon(0.05));
}

TEST_CASE("mfvi training improves the ELBO on toy data") {
  int improved = 0;
  for (int seed = 0; seed < 20; ++seed) {
    TrainData d = standardized_toy(500 + seed);
    MfviConfig cfg;
    cfg.steps = 400;
    cfg.lr = 3e-3;
    MfviParams trained = mfvi_train(d, {1, 8, 1}, cfg, 600 + seed);
    MfviParams init = mfvi_init({1, 8, 1}, 600 + seed);
    init.log_sigma2 = -3.0;

    Rng noise_rng(700 + seed);
    MfviNoise noise = mfvi_draw_noise({1, 8, 1}, d.n(), 20, noise_rng);
    const double before = mfvi_objective(init, d.x, d.y, d.n(), noise, nullptr);
    const double after = mfvi_objective(trained, d.x, d.y, d.n(), noise, nullptr);
    if (after > before) ++improved;
  }
  REQUIRE(improved >= 11);
}

TEST_CASE("mfvi_predict: deterministic limit collapses the mixture") {
  MfviParams p = mfvi_init({1, 3, 1}, 8);
  for (auto& w : p.log_std.weights) w.setConstant(-20.0);
  for (auto& b : p.log_std.biases) b.setConstant(-20.0);
  Matrix x(2, 1);
  x << 0.3, -0.7;
  Rng rng(9);
  auto mixtures = mfvi_predict(p, x, 100, rng);
  REQUIRE(mixtures.size() == 2);
  const Vector det = mlp::forward_output(p.mu, x);
  for (Index i = 0; i < 2; ++i) {
    REQUIRE(mixtures[i].size() == 100);
    const auto& comps =
        std::get<std::vector<GaussianPredictive>>(mixtures[i].components);
    for (const auto& c : comps) REQUIRE(c.mean == Approx(det(i)).margin(1e-6));
  }
}

TEST_CASE("mfvi_predict: linear 1-weight model matches the analytic mean") {
  // Network out = w * x + b with b ~ delta(0), w ~ N(0.7, 0.2^2): predictive
  // mean at x = 2 is 1.4 with Monte Carlo s.e. 0.4/sqrt(100).
  MfviParams p = mfvi_init({1, 1}, 10);
  p.mu.weights[0](0, 0) = 0.7;
  p.mu.biases[0](0) = 0.0;
  p.log_std.weights[0](0, 0) = std::log(0.2);
  p.log_std.biases[0](0) = -20.0;
  Matrix x(1, 1);
  x << 2.0;
  Rng rng(11);
  auto mixtures = mfvi_predict(p, x, 100, rng);
  const double mean = mixture_predict(mixtures[0], 0.0).mean;
  REQUIRE(mean == Approx(1.4).margin(3.0 * 0.4 / 10.0));
}

TEST_CASE("mcd weight decay mapping") {
  REQUIRE(mcd_weight_decay(0.05, 1000) == Approx(0.000475));
}

TEST_CASE("mcd: p = 0 gives a deterministic forward pass") {
  McdParams p;
  p.params = mlp::init_params({2, 5, 1}, 12);
  p.dropout_p = 0.0;
  p.log_sigma2 = -2.0;
  Rng rng(13);
  Matrix x(3, 2);
  x << 0.1, -0.2, 0.5, 0.9, -1.0, 0.3;
  auto mixtures = mcd_predict(p, x, 100, rng);
  const Vector det = mlp::forward_output(p.params, x);
  for (Index i = 0; i < 3; ++i) {
    const auto& comps =
        std::get<std::vector<GaussianPredictive>>(mixtures[i].components);
    REQUIRE(comps.size() == 100);
    for (const auto& c : comps) REQUIRE(c.mean == Approx(det(i)).margin(1e-12));
  }
}

TEST_CASE("mcd mask expectation is (1-p) of the activation") {
  mlp::Params net = mlp::init_params({1, 6, 1}, 14);
  Matrix x(1, 1);
  x << 0.8;
  mlp::Trace trace = mlp::forward_trace(net, x);
  const Matrix& clean = trace.features_raw();

  Rng rng(15);
  const double p = 0.3;
  Matrix acc = Matrix::Zero(1, 6);
  const int draws = 10000;
  for (int t = 0; t < draws; ++t) {
    std::vector<Matrix> acts;
    mcd_forward(net, x, p, rng, &acts);
    acc += acts[1];
  }
  acc /= static_cast<double>(draws);
  for (Index j = 0; j < 6; ++j) {
    if (std::abs(clean(0, j)) < 1e-9) continue;
    REQUIRE(acc(0, j) == Approx((1.0 - p) * clean(0, j)).epsilon(0.02 * 3));
  }
}

TEST_CASE("mcd training reduces the fit error on toy data") {
  TrainData d = standardized_toy(900);
  McdConfig cfg;
  cfg.steps = 2000;
  cfg.lr = 3e-3;
  McdParams trained = mcd_train(d, {1, 16, 1}, cfg, 901);
  const Vector pred = mlp::forward_output(trained.params, d.x);  // mask-free mean net
  const double rmse = std::sqrt((pred - d.y).squaredNorm() / d.n());
  mlp::Params init = mlp::init_params({1, 16, 1}, derive_seed(901, {1}));
  const Vector pred0 = mlp::forward_output(init, d.x);
  const double rmse0 = std::sqrt((pred0 - d.y).squaredNorm() / d.n());
  REQUIRE(rmse < rmse0);
  REQUIRE(rmse < 0.6);
}

TEST_CASE("baseline predictions flow through mixture_predict like NL models") {
  TrainData d = small_data(12, 16);
  MfviConfig cfg;
  cfg.steps = 50;
  MfviParams p = mfvi_train(d, {1, 4, 1}, cfg, 17);
  Rng rng(18);
  auto mixtures = mfvi_predict(p, d.x, 25, rng);
  for (Index i = 0; i < d.n(); ++i) {
    MixtureStats s = mixture_predict(mixtures[i], d.y(i));
    REQUIRE(std::isfinite(s.log_density));
    REQUIRE(std::isfinite(s.mean));
    REQUIRE(s.variance >= 0.0);
  }
}
