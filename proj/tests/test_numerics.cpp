#include <catch2/catch_amalgamated.hpp>

#include <Eigen/LU>
#include <cmath>

#include "nlb/linalg.hpp"
#include "nlb/rng.hpp"
#include "nlb/special.hpp"
#include "support/oracles.hpp"

using namespace nlb;
using Catch::Approx;

namespace {

Matrix random_spd(Index dim, Rng& rng) {
  Matrix a(dim, dim);
  for (Index i = 0; i < dim; ++i)
    for (Index j = 0; j < dim; ++j) a(i, j) = rng.normal();
  Matrix spd = a * a.transpose();
  spd.diagonal().array() += 0.1;
  return spd;
}

}  // namespace

TEST_CASE("cholesky of identity") {
  Matrix id = Matrix::Identity(3, 3);
  CholeskyFactor f = cholesky(id);
  REQUIRE((f.lower - id).cwiseAbs().maxCoeff() == Approx(0.0).margin(1e-15));
}

TEST_CASE("cholesky matches hand recursion on 2x2") {
  Matrix a(2, 2);
  a << 4, 2, 2, 3;
  CholeskyFactor f = cholesky(a);
  CHECK(f.lower(0, 0) == Approx(2.0));
  CHECK(f.lower(0, 1) == Approx(0.0).margin(0.0));
  CHECK(f.lower(1, 0) == Approx(1.0));
  CHECK(f.lower(1, 1) == Approx(std::sqrt(2.0)));
}

TEST_CASE("cholesky rejects an indefinite matrix") {
  Matrix a(2, 2);
  a << 1, 2, 2, 1;  // eigenvalues 3, -1
  REQUIRE_THROWS_AS(cholesky(a), NotPositiveDefinite);
}

TEST_CASE("cholesky rejects non-square and asymmetric input") {
  REQUIRE_THROWS_AS(cholesky(Matrix::Zero(2, 3)), DimensionMismatch);
  Matrix a(2, 2);
  a << 1, 0.5, 0.2, 1;
  REQUIRE_THROWS_AS(cholesky(a), DimensionMismatch);
}

TEST_CASE("jitter escalation recovers a barely-singular matrix") {
  // Rank-deficient PSD: jitter floor must rescue it.
  Matrix a(2, 2);
  a << 1, 1, 1, 1;
  CholeskyFactor f = cholesky(a);
  REQUIRE(f.lower(0, 0) > 0.0);
  REQUIRE(f.lower(1, 1) > 0.0);
  Matrix rec = f.lower * f.lower.transpose();
  REQUIRE((rec - a).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("solve_psd identity and hand-solved 2x2") {
  CholeskyFactor id = cholesky(Matrix::Identity(2, 2));
  Vector b(2);
  b << 1, 2;
  Vector x = solve_psd(id, b);
  CHECK(x(0) == Approx(1.0));
  CHECK(x(1) == Approx(2.0));

  Matrix a(2, 2);
  a << 4, 2, 2, 3;
  Vector b2(2);
  b2 << 8, 7;
  Vector x2 = solve_psd(cholesky(a), b2);
  CHECK(x2(0) == Approx(1.25));
  CHECK(x2(1) == Approx(1.5));
}

TEST_CASE("solve_psd dimension mismatch") {
  CholeskyFactor f = cholesky(Matrix::Identity(3, 3));
  Matrix bad = Matrix::Zero(2, 1);
  REQUIRE_THROWS_AS(solve_psd(f, bad), DimensionMismatch);
}

TEST_CASE("logdet_psd reference values") {
  CHECK(logdet_psd(cholesky(Matrix::Identity(5, 5))) == Approx(0.0).margin(1e-14));

  Matrix a(2, 2);
  a << 4, 2, 2, 3;
  CHECK(logdet_psd(cholesky(a)) == Approx(std::log(8.0)));  // det = 12 - 4

  Matrix d = Matrix::Zero(2, 2);
  d.diagonal().setConstant(std::numbers::e);
  CHECK(logdet_psd(cholesky(d)) == Approx(2.0));
}

TEST_CASE("random SPD suite: logdet vs LU determinant, solve residuals") {
  Rng rng(20240811);
  for (int rep = 0; rep < 200; ++rep) {
    const Index dim = 1 + static_cast<Index>(rng.integer(20));
    Matrix a = random_spd(dim, rng);
    CholeskyFactor f = cholesky(a);

    Eigen::PartialPivLU<Eigen::MatrixXd> lu{Eigen::MatrixXd(a)};
    const double det = lu.determinant();
    REQUIRE(det > 0.0);
    REQUIRE(logdet_psd(f) == Approx(std::log(det)).epsilon(1e-8));

    Vector b(dim);
    for (Index i = 0; i < dim; ++i) b(i) = rng.normal();
    Vector x = solve_psd(f, b);
    const double resid = (a * x - b).cwiseAbs().maxCoeff();
    REQUIRE(resid <= 1e-8 * std::max(b.cwiseAbs().maxCoeff(), 1.0));
  }
}

TEST_CASE("cholesky is bit-deterministic") {
  Rng rng(7);
  Matrix a = random_spd(12, rng);
  CholeskyFactor f1 = cholesky(a);
  CholeskyFactor f2 = cholesky(a);
  REQUIRE(std::memcmp(f1.lower.data(), f2.lower.data(),
                      sizeof(double) * f1.lower.size()) == 0);
}

TEST_CASE("inverse_psd inverts") {
  Rng rng(99);
  Matrix a = random_spd(6, rng);
  Matrix inv = inverse_psd(cholesky(a));
  REQUIRE((a * inv - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("log_gamma matches std::lgamma") {
  for (double x : {0.1, 0.5, 1.0, 1.5, 2.0, 3.75, 10.0, 51.0, 500.5, 4321.0}) {
    REQUIRE(log_gamma(x) == Approx(std::lgamma(x)).epsilon(1e-12).margin(1e-12));
  }
}

TEST_CASE("digamma matches series identity") {
  // psi(x+1) = psi(x) + 1/x
  for (double x : {0.3, 1.0, 2.5, 7.0, 40.0}) {
    REQUIRE(digamma(x + 1.0) == Approx(digamma(x) + 1.0 / x).epsilon(1e-11));
  }
  // psi(1) = -EulerGamma
  REQUIRE(digamma(1.0) == Approx(-0.57721566490153286).epsilon(1e-11));
}

TEST_CASE("logsumexp basics") {
  std::vector<double> xs = {std::log(0.25), std::log(0.75)};
  REQUIRE(logsumexp(xs) == Approx(0.0).margin(1e-14));
  std::vector<double> shifted = {1000.0, 1000.0};
  REQUIRE(logsumexp(shifted) == Approx(1000.0 + std::log(2.0)));
}

TEST_CASE("student-t density reduces to Cauchy and approaches Gaussian") {
  // dof = 1, scale = 1 is the standard Cauchy.
  REQUIRE(log_student_t_pdf(0.0, 0.0, 1.0, 1.0) ==
          Approx(std::log(1.0 / std::numbers::pi)));
  // Large dof approaches the Gaussian with matching variance.
  REQUIRE(log_student_t_pdf(0.3, 0.0, 1.0, 1e7) ==
          Approx(log_normal_pdf(0.3, 0.0, 1.0)).margin(1e-5));
}

TEST_CASE("seed derivation: distinct paths give distinct streams") {
  const std::uint64_t a = derive_seed(42, {1, 2, 3});
  const std::uint64_t b = derive_seed(42, {1, 2, 4});
  const std::uint64_t c = derive_seed(42, {1, 2, 3});
  REQUIRE(a != b);
  REQUIRE(a == c);
}

TEST_CASE("rng moments sanity") {
  Rng rng(123);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  REQUIRE(sum / n == Approx(0.0).margin(0.01));
  REQUIRE(sq / n == Approx(1.0).margin(0.02));
}
