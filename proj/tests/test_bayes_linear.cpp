#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <chrono>
#include <cmath>

#include "nlb/bayes_linear.hpp"
#include "nlb/rng.hpp"
#include "support/oracles.hpp"

using namespace nlb;
using Catch::Approx;

namespace {

struct Instance {
  Matrix phi;
  Vector y;
};

Instance random_instance(Index n, Index m, Rng& rng) {
  Instance inst;
  inst.phi = Matrix(n, m);
  for (Index i = 0; i < inst.phi.size(); ++i)
    *(inst.phi.data() + i) = rng.normal();
  inst.y = Vector(n);
  for (Index i = 0; i < n; ++i) inst.y(i) = rng.normal(0.0, 1.5);
  return inst;
}

Eigen::MatrixXd dense_cov_gaussian(const Matrix& phi, const GaussianPrior& pr) {
  const Vector a = prior_diag(pr.alpha_w, pr.alpha_b, phi.cols());
  Eigen::MatrixXd cov = phi * a.asDiagonal() * phi.transpose();
  cov.diagonal().array() += pr.sigma2;
  return cov;
}

Eigen::MatrixXd dense_scale_nig(const Matrix& phi, const NigPrior& pr) {
  const Vector a = prior_diag(pr.alpha_w, pr.alpha_b, phi.cols());
  Eigen::MatrixXd s = phi * a.asDiagonal() * phi.transpose();
  s.diagonal().array() += 1.0;
  return (pr.b0 / pr.a0) * s;
}

}  // namespace

TEST_CASE("blr_fit: empty data recovers the prior") {
  Matrix phi(0, 3);
  Vector y(0);
  GaussianPrior pr{2.0, 5.0, 1.0};
  auto post = blr_fit(phi, y, pr);
  REQUIRE(post.w_n.cwiseAbs().maxCoeff() == 0.0);
  Matrix v_n = inverse_psd(post.vn_inv_chol);
  CHECK(v_n(0, 0) == Approx(2.0));
  CHECK(v_n(1, 1) == Approx(2.0));
  CHECK(v_n(2, 2) == Approx(5.0));
}

TEST_CASE("blr_fit: bias-only hand example") {
  Matrix phi(2, 1);
  phi << 1, 1;
  Vector y(2);
  y << 1, 3;
  GaussianPrior pr{1.0, 1.0, 1.0};  // alpha_b governs the single column
  auto post = blr_fit(phi, y, pr);
  CHECK(inverse_psd(post.vn_inv_chol)(0, 0) == Approx(1.0 / 3.0));
  CHECK(post.w_n(0) == Approx(4.0 / 3.0));

  // Continue to the predictive.
  Vector star(1);
  star << 1.0;
  GaussianPredictive pred = blr_predict(post, star);
  CHECK(pred.mean == Approx(4.0 / 3.0));
  CHECK(pred.variance == Approx(1.0 + 1.0 / 3.0));
}

TEST_CASE("blr_fit: flat prior approaches ordinary least squares") {
  Rng rng(51);
  Instance inst = random_instance(30, 4, rng);
  GaussianPrior pr{1e8, 1e8, 1.0};
  auto post = blr_fit(inst.phi, inst.y, pr);
  Vector ols = (inst.phi.transpose() * inst.phi)
                   .ldlt()
                   .solve(inst.phi.transpose() * inst.y);
  REQUIRE((post.w_n - ols).cwiseAbs().maxCoeff() <
          1e-4 * std::max(1.0, ols.cwiseAbs().maxCoeff()));
}

TEST_CASE("blr_predict: prior predictive at the bias feature") {
  Matrix phi(0, 4);
  Vector y(0);
  GaussianPrior pr{3.0, 7.0, 0.5};
  auto post = blr_fit(phi, y, pr);
  Vector star = Vector::Zero(4);
  star(3) = 1.0;
  GaussianPredictive pred = blr_predict(post, star);
  CHECK(pred.mean == 0.0);
  CHECK(pred.variance == Approx(0.5 + 7.0));
}

TEST_CASE("blr_predict: variance shrinks when a duplicate row is added") {
  Rng rng(52);
  Instance inst = random_instance(10, 3, rng);
  GaussianPrior pr{1.0, 1.0, 0.7};
  auto post_small = blr_fit(inst.phi, inst.y, pr);

  Matrix phi2(11, 3);
  phi2.topRows(10) = inst.phi;
  phi2.row(10) = inst.phi.row(4);
  Vector y2(11);
  y2.head(10) = inst.y;
  y2(10) = inst.y(4);
  auto post_big = blr_fit(phi2, y2, pr);

  Vector star = inst.phi.row(4);
  REQUIRE(blr_predict(post_big, star).variance <
          blr_predict(post_small, star).variance);
}

TEST_CASE("blr_predict dimension mismatch") {
  Rng rng(53);
  Instance inst = random_instance(5, 3, rng);
  auto post = blr_fit(inst.phi, inst.y, GaussianPrior{1, 1, 1});
  Vector star = Vector::Zero(2);
  REQUIRE_THROWS_AS(blr_predict(post, star), DimensionMismatch);
}

TEST_CASE("blr_log_marginal: 1-D hand value") {
  Matrix phi(1, 1);
  phi << 1.0;
  Vector y(1);
  y << 2.0;
  const double v = blr_log_marginal_value(suff_stats(phi, y), GaussianPrior{1, 1, 1});
  // log N(2; 0, 2)
  REQUIRE(v == Approx(-0.5 * std::log(4.0 * std::numbers::pi) - 1.0).epsilon(1e-12));
  REQUIRE(v == Approx(-2.26552).epsilon(1e-5));
}

TEST_CASE("blr_log_marginal: zero targets reduce to the determinant term") {
  Rng rng(54);
  Instance inst = random_instance(12, 4, rng);
  inst.y.setZero();
  GaussianPrior pr{0.8, 2.0, 1.3};
  const double v = blr_log_marginal_value(suff_stats(inst.phi, inst.y), pr);
  Eigen::MatrixXd cov = dense_cov_gaussian(inst.phi, pr);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
  const double expect = -0.5 * ldlt.vectorD().array().log().sum() -
                        0.5 * 12 * std::log(2.0 * std::numbers::pi);
  REQUIRE(v == Approx(expect).epsilon(1e-10));
}

TEST_CASE("blr_log_marginal: 100 random instances vs dense oracle + finite differences") {
  Rng rng(20240813);
  for (int rep = 0; rep < 100; ++rep) {
    const Index n = 1 + static_cast<Index>(rng.integer(40));
    const Index m = 1 + static_cast<Index>(rng.integer(8));
    Instance inst = random_instance(n, m, rng);
    GaussianPrior pr{std::exp(rng.uniform(-2.0, 2.0)),
                     std::exp(rng.uniform(-2.0, 2.0)),
                     std::exp(rng.uniform(-2.0, 1.0))};

    BlrEvidence ev = blr_log_marginal(inst.phi, inst.y, pr);
    const double expect =
        oracle::dense_gaussian_logpdf(inst.y, dense_cov_gaussian(inst.phi, pr));
    REQUIRE(ev.value == Approx(expect).epsilon(1e-8));
    REQUIRE(ev.value ==
            Approx(blr_log_marginal_value(suff_stats(inst.phi, inst.y), pr))
                .epsilon(1e-12));

    if (rep % 7 != 0) continue;  // gradient sweep on a subset, it is O(NM) evals

    auto value_at = [&](const Matrix& phi, const GaussianPrior& q) {
      return blr_log_marginal_value(suff_stats(phi, inst.y), q);
    };
    // log-hyperparameter gradients
    const double h = 1e-6;
    {
      GaussianPrior up = pr, dn = pr;
      up.alpha_w *= std::exp(h);
      dn.alpha_w *= std::exp(-h);
      const double fd = (value_at(inst.phi, up) - value_at(inst.phi, dn)) / (2 * h);
      REQUIRE(ev.d_log_alpha_w == Approx(fd).epsilon(1e-5).margin(1e-6));
    }
    {
      GaussianPrior up = pr, dn = pr;
      up.alpha_b *= std::exp(h);
      dn.alpha_b *= std::exp(-h);
      const double fd = (value_at(inst.phi, up) - value_at(inst.phi, dn)) / (2 * h);
      REQUIRE(ev.d_log_alpha_b == Approx(fd).epsilon(1e-5).margin(1e-6));
    }
    {
      GaussianPrior up = pr, dn = pr;
      up.sigma2 *= std::exp(h);
      dn.sigma2 *= std::exp(-h);
      const double fd = (value_at(inst.phi, up) - value_at(inst.phi, dn)) / (2 * h);
      REQUIRE(ev.d_log_sigma2 == Approx(fd).epsilon(1e-5).margin(1e-6));
    }
    // feature-matrix gradients (a few random entries)
    for (int k = 0; k < 6; ++k) {
      const Index i = static_cast<Index>(rng.integer(n));
      const Index j = static_cast<Index>(rng.integer(m));
      Matrix phi = inst.phi;
      const double orig = phi(i, j);
      phi(i, j) = orig + 1e-6;
      const double up = value_at(phi, pr);
      phi(i, j) = orig - 1e-6;
      const double dn = value_at(phi, pr);
      const double fd = (up - dn) / 2e-6;
      REQUIRE(ev.d_phi(i, j) == Approx(fd).epsilon(1e-5).margin(1e-6));
    }
  }
}

TEST_CASE("sequential update: posterior after D1 used as prior for D2") {
  // Fitting on D1 u D2 must equal fitting on D2 with the D1 posterior as the
  // prior. Verified in precision form:
  //   V^{-1}(D1 u D2) = V^{-1}(after D1) + Phi2' Phi2 / s2.
  Rng rng(55);
  Instance d1 = random_instance(14, 4, rng);
  Instance d2 = random_instance(9, 4, rng);
  GaussianPrior pr{1.7, 0.6, 0.9};

  Matrix phi_all(23, 4);
  phi_all.topRows(14) = d1.phi;
  phi_all.bottomRows(9) = d2.phi;
  Vector y_all(23);
  y_all.head(14) = d1.y;
  y_all.tail(9) = d2.y;
  auto post_all = blr_fit(phi_all, y_all, pr);

  auto post_1 = blr_fit(d1.phi, d1.y, pr);
  // Manual second stage with a full Gaussian prior N(w; w1, V1):
  //   V2^{-1} = V1^{-1} + Phi2' Phi2 / s2
  //   w2 = V2 (V1^{-1} w1 + Phi2' y2 / s2)
  Matrix v1_inv = post_1.vn_inv_chol.lower * post_1.vn_inv_chol.lower.transpose();
  Matrix v2_inv = v1_inv + d2.phi.transpose() * d2.phi / pr.sigma2;
  Vector rhs = v1_inv * post_1.w_n + d2.phi.transpose() * d2.y / pr.sigma2;
  Vector w2 = solve_psd(cholesky(v2_inv), rhs);

  REQUIRE((w2 - post_all.w_n).cwiseAbs().maxCoeff() < 1e-10);
  Matrix v_all_inv =
      post_all.vn_inv_chol.lower * post_all.vn_inv_chol.lower.transpose();
  REQUIRE((v2_inv - v_all_inv).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("nig_fit: a_N is exactly a0 + N/2") {
  Rng rng(56);
  Instance inst = random_instance(100, 5, rng);
  auto post = nig_fit(inst.phi, inst.y, NigPrior{1, 1, 1, 1});
  REQUIRE(post.a_n == 51.0);
}

TEST_CASE("nig_fit: zero targets keep b0 and zero mean") {
  Rng rng(57);
  Instance inst = random_instance(15, 3, rng);
  inst.y.setZero();
  auto post = nig_fit(inst.phi, inst.y, NigPrior{2, 1, 1.5, 0.75});
  REQUIRE(post.w_n.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(post.b_n == Approx(0.75));
}

TEST_CASE("nig_fit: bias-only hand example") {
  Matrix phi(2, 1);
  phi << 1, 1;
  Vector y(2);
  y << 1, 3;
  NigPrior pr{1, 1, 1, 1};
  auto post = nig_fit(phi, y, pr);
  CHECK(inverse_psd(post.vn_inv_chol)(0, 0) == Approx(1.0 / 3.0));
  CHECK(post.w_n(0) == Approx(4.0 / 3.0));
  CHECK(post.a_n == Approx(2.0));
  CHECK(post.b_n == Approx(10.0 / 3.0));

  Vector star(1);
  star << 1.0;
  StudentTPredictive pred = nig_predict(post, star);
  CHECK(pred.mean == Approx(4.0 / 3.0));
  CHECK(pred.scale == Approx(20.0 / 9.0));
  CHECK(pred.dof == Approx(4.0));
}

TEST_CASE("nig_predict: prior predictive at N = 0") {
  Matrix phi(0, 2);
  Vector y(0);
  NigPrior pr{1.0, 2.0, 1.25, 0.5};
  auto post = nig_fit(phi, y, pr);
  Vector star(2);
  star << 0.0, 1.0;
  StudentTPredictive pred = nig_predict(post, star);
  CHECK(pred.dof == Approx(2.0 * 1.25));
  CHECK(pred.mean == 0.0);
  CHECK(pred.scale == Approx((0.5 / 1.25) * (1.0 + 2.0)));
}

TEST_CASE("student-t predictive approaches Gaussian at large dof") {
  // a_N = 1e4 with b_N/a_N fixed: log density at the mean approaches the
  // Gaussian value with variance = scale.
  StudentTPredictive t{0.4, 0.9, 2e4};
  const double g = log_normal_pdf(0.4, 0.4, 0.9);
  REQUIRE(t.log_density(0.4) == Approx(g).margin(1e-3));
}

TEST_CASE("nig_log_marginal: univariate t oracle at N = 1") {
  Matrix phi(1, 1);
  phi << 1.0;
  Vector y(1);
  y << 0.0;
  NigPrior pr{1, 1, 1, 1};
  const double v = nig_log_marginal_value(suff_stats(phi, y), pr);
  // T(0; 0, scale 2, dof 2)
  REQUIRE(v == Approx(log_student_t_pdf(0.0, 0.0, 2.0, 2.0)).epsilon(1e-12));
  REQUIRE(v == Approx(std::log(0.25)).epsilon(1e-12));
}

TEST_CASE("nig_log_marginal: identity under y -> 1*y") {
  Rng rng(58);
  Instance inst = random_instance(10, 3, rng);
  NigPrior pr{1, 1, 1, 1};
  const double base = nig_log_marginal_value(suff_stats(inst.phi, inst.y), pr);
  Vector scaled = 1.0 * inst.y;
  REQUIRE(nig_log_marginal_value(suff_stats(inst.phi, scaled), pr) == base);
}

TEST_CASE("nig_log_marginal: 100 random instances vs dense t oracle + finite differences") {
  Rng rng(20240814);
  for (int rep = 0; rep < 100; ++rep) {
    const Index n = 1 + static_cast<Index>(rng.integer(40));
    const Index m = 1 + static_cast<Index>(rng.integer(8));
    Instance inst = random_instance(n, m, rng);
    NigPrior pr{std::exp(rng.uniform(-2.0, 2.0)), std::exp(rng.uniform(-2.0, 2.0)),
                std::exp(rng.uniform(-1.0, 1.5)), std::exp(rng.uniform(-1.0, 1.5))};

    NigEvidence ev = nig_log_marginal(inst.phi, inst.y, pr);
    const double expect = oracle::dense_student_t_logpdf(
        inst.y, dense_scale_nig(inst.phi, pr), 2.0 * pr.a0);
    REQUIRE(ev.value == Approx(expect).epsilon(1e-8));

    if (rep % 7 != 0) continue;

    auto value_at = [&](const Matrix& phi, const NigPrior& q) {
      return nig_log_marginal_value(suff_stats(phi, inst.y), q);
    };
    const double h = 1e-6;
    auto check_log_grad = [&](double NigPrior::* field, double got) {
      NigPrior up = pr, dn = pr;
      up.*field *= std::exp(h);
      dn.*field *= std::exp(-h);
      const double fd = (value_at(inst.phi, up) - value_at(inst.phi, dn)) / (2 * h);
      REQUIRE(got == Approx(fd).epsilon(1e-5).margin(1e-6));
    };
    check_log_grad(&NigPrior::alpha_w, ev.d_log_alpha_w);
    check_log_grad(&NigPrior::alpha_b, ev.d_log_alpha_b);
    check_log_grad(&NigPrior::a0, ev.d_log_a0);
    check_log_grad(&NigPrior::b0, ev.d_log_b0);
    for (int k = 0; k < 6; ++k) {
      const Index i = static_cast<Index>(rng.integer(n));
      const Index j = static_cast<Index>(rng.integer(m));
      Matrix phi = inst.phi;
      const double orig = phi(i, j);
      phi(i, j) = orig + 1e-6;
      const double up = value_at(phi, pr);
      phi(i, j) = orig - 1e-6;
      const double dn = value_at(phi, pr);
      REQUIRE(ev.d_phi(i, j) == Approx((up - dn) / 2e-6).epsilon(1e-5).margin(1e-6));
    }
  }
}

TEST_CASE("predictive densities integrate to one") {
  Rng rng(59);
  Instance inst = random_instance(24, 4, rng);
  auto gpost = blr_fit(inst.phi, inst.y, GaussianPrior{1.0, 1.0, 0.8});
  auto tpost = nig_fit(inst.phi, inst.y, NigPrior{1, 1, 1, 1});
  Vector star = inst.phi.row(3);

  GaussianPredictive gp = blr_predict(gpost, star);
  const double gsd = std::sqrt(gp.variance);
  const double gmass = oracle::simpson(
      [&](double y) { return std::exp(gp.log_density(y)); }, gp.mean - 12 * gsd,
      gp.mean + 12 * gsd, 20000);
  REQUIRE(gmass == Approx(1.0).margin(1e-6));

  StudentTPredictive tp = nig_predict(tpost, star);
  const double tsd = std::sqrt(tp.scale);
  const double tmass = oracle::simpson(
      [&](double y) { return std::exp(tp.log_density(y)); }, tp.mean - 12 * tsd,
      tp.mean + 12 * tsd, 20000);
  REQUIRE(tmass == Approx(1.0).margin(1e-6));
}

TEST_CASE("evidence evaluation never forms an N x N matrix (large-N smoke)") {
  // 200k rows would need a 320 GB dense covariance; the M x M path must
  // finish in well under a second.
  const Index n = 200000, m = 6;
  Rng rng(60);
  Matrix phi(n, m);
  for (Index i = 0; i < phi.size(); ++i) *(phi.data() + i) = rng.normal();
  Vector y(n);
  for (Index i = 0; i < n; ++i) y(i) = rng.normal();
  const auto t0 = std::chrono::steady_clock::now();
  const SuffStats s = suff_stats(phi, y);
  const double g = blr_log_marginal_value(s, GaussianPrior{1, 1, 1});
  const double t = nig_log_marginal_value(s, NigPrior{1, 1, 1, 1});
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  REQUIRE(std::isfinite(g));
  REQUIRE(std::isfinite(t));
  REQUIRE(secs < 2.0);
}
