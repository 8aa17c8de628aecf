#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>

#include "tp/expr.hpp"
#include "tp/gaussian.hpp"
#include "tp/rng.hpp"

using namespace tp;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_matrix(std::mt19937_64& rng, int r, int c) {
  std::normal_distribution<double> nd;
  MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

GaussianSpec spec2(double v1, double v12, double v2, double m1 = 0,
                   double m2 = 0) {
  GaussianSpec gs;
  gs.labels = {1, 2};
  gs.mean = VectorXd(2);
  gs.mean << m1, m2;
  gs.cov = MatrixXd(2, 2);
  gs.cov << v1, v12, v12, v2;
  return gs;
}

}  // namespace

TEST_CASE("gauss-hermite nodes integrate polynomial moments exactly") {
  std::vector<double> x, w;
  gauss_hermite(12, x, w);
  double s0 = 0, s2 = 0, s4 = 0, s6 = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    s0 += w[i];
    s2 += w[i] * x[i] * x[i];
    s4 += w[i] * std::pow(x[i], 4);
    s6 += w[i] * std::pow(x[i], 6);
  }
  CHECK(s0 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s2 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s4 == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(s6 == doctest::Approx(15.0).epsilon(1e-11));
}

TEST_CASE("pseudoinverse satisfies the four Moore-Penrose identities") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    int r = 2 + static_cast<int>(rng() % 4);
    int c = 2 + static_cast<int>(rng() % 4);
    MatrixXd a = random_matrix(rng, r, c);
    if (trial % 3 == 0 && c >= 2) a.col(1) = 2.0 * a.col(0);  // rank deficient
    MatrixXd ap = pinv(a);
    CHECK((a * ap * a - a).norm() < 1e-8);
    CHECK((ap * a * ap - ap).norm() < 1e-8);
    CHECK((a * ap - (a * ap).transpose()).norm() < 1e-8);
    CHECK((ap * a - (ap * a).transpose()).norm() < 1e-8);
  }
}

TEST_CASE("expectation of the identity reproduces mean and covariance") {
  GaussianSpec gs = spec2(2.0, 0.5, 1.0, 0.3, -0.2);
  std::vector<ExprPtr> fns = {make_leaf(1), make_leaf(2)};
  ExpectResult r = expect(fns, gs, ExpectationMethod::quad(40));
  CHECK(r.mean(0) == doctest::Approx(0.3).epsilon(1e-10));
  CHECK(r.mean(1) == doctest::Approx(-0.2).epsilon(1e-10));
  // gram holds second moments: K + mu mu^T
  CHECK(r.gram(0, 0) == doctest::Approx(2.0 + 0.09).epsilon(1e-10));
  CHECK(r.gram(0, 1) == doctest::Approx(0.5 + 0.3 * -0.2).epsilon(1e-10));
  CHECK(r.gram(1, 1) == doctest::Approx(1.0 + 0.04).epsilon(1e-10));
}

TEST_CASE("gaussian expectations match closed forms") {
  // E relu(z)^2 = var/2 for centered z; E relu(z1) E relu(z2) = var/(2 pi)
  // off-diagonal when independent.
  GaussianSpec gs = spec2(1.0, 0.0, 1.0);
  ExprPtr r1 = make_apply({"relu", {}, -1}, {make_leaf(1)});
  ExprPtr r2 = make_apply({"relu", {}, -1}, {make_leaf(2)});
  ExpectResult r = expect({r1, r2}, gs, ExpectationMethod::quad(40));
  CHECK(r.gram(0, 0) == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(r.gram(1, 1) == doctest::Approx(0.5).epsilon(1e-10));
  // relu has a kink, so fixed-order quadrature carries visible truncation
  // error; the independence factorization is exact for the same rule.
  CHECK(r.gram(0, 1) == doctest::Approx(r.mean(0) * r.mean(1)).epsilon(1e-10));
  CHECK(r.gram(0, 1) ==
        doctest::Approx(1.0 / (2.0 * std::numbers::pi)).epsilon(0.05));

  // Stein: E z tanh(z) = var * E tanh'(z).
  GaussianSpec g1;
  g1.labels = {1};
  g1.mean = VectorXd::Zero(1);
  g1.cov = MatrixXd::Constant(1, 1, 1.7);
  ExprPtr zt = make_apply({"mul", {}, -1},
                          {make_leaf(1), make_apply({"tanh", {}, -1},
                                                    {make_leaf(1)})});
  ExprPtr dt = make_apply({"tanh", {}, 0}, {make_leaf(1)});
  double lhs = expect_scalar(zt, g1, ExpectationMethod::quad(60));
  double rhs = 1.7 * expect_scalar(dt, g1, ExpectationMethod::quad(60));
  // The two integrands have different truncation errors at fixed order.
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
}

TEST_CASE("quadrature and monte carlo agree within sampling error") {
  GaussianSpec gs = spec2(1.3, 0.4, 0.8, 0.1, 0.0);
  ExprPtr f = make_apply({"mul", {}, -1},
                         {make_apply({"tanh", {}, -1}, {make_leaf(1)}),
                          make_apply({"erf", {}, -1}, {make_leaf(2)})});
  double q = expect_scalar(f, gs, ExpectationMethod::quad(40));
  double m = expect_scalar(f, gs, ExpectationMethod::mc(2000000, 5));
  CHECK(std::fabs(q - m) < 3e-3);  // ~3 standard errors at 2e6 samples
}

TEST_CASE("monte carlo is reproducible and thread-count independent") {
  GaussianSpec gs = spec2(1.0, 0.3, 1.0);
  ExprPtr f = make_apply({"mul", {}, -1}, {make_leaf(1), make_leaf(2)});
  ExpectationMethod serial = ExpectationMethod::mc(100000, 42);
  serial.parallel = false;
  ExpectationMethod par = ExpectationMethod::mc(100000, 42);
  par.parallel = true;
  double a = expect_scalar(f, gs, serial);
  double b = expect_scalar(f, gs, par);
  double c = expect_scalar(f, gs, par);
  CHECK(a == b);
  CHECK(b == c);
}

TEST_CASE("v_op of the identity is the identity on kernels") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    MatrixXd f = random_matrix(rng, 3, 3);
    MatrixXd sigma = f * f.transpose();
    MatrixXd out = v_op([](double x) { return x; }, sigma,
                        ExpectationMethod::quad(40));
    CHECK((out - sigma).norm() < 1e-8 * (1.0 + sigma.norm()));
  }
}

TEST_CASE("conditioning a gaussian matches the closed-form partition") {
  // Direct check of the conditional mean/covariance against the Schur
  // complement formula computed by hand on a 3-d example.
  GaussianSpec gs;
  gs.labels = {1, 2, 3};
  gs.cov = MatrixXd(3, 3);
  gs.cov << 4.0, 1.0, 0.5, 1.0, 3.0, 0.7, 0.5, 0.7, 2.0;
  gs.mean = VectorXd(3);
  gs.mean << 1.0, -1.0, 0.5;
  // Condition coordinate 0 on observing coordinates {1, 2} = y.
  VectorXd y(2);
  y << 0.3, -0.4;
  GaussianSpec gc = condition_gaussian(gs, {1, 2}, y);
  MatrixXd kbb(2, 2);
  kbb << 3.0, 0.7, 0.7, 2.0;
  Eigen::RowVector2d kab(1.0, 0.5);
  VectorXd d = y - gs.mean.segment(1, 2);
  double want_mean = 1.0 + (kab * kbb.inverse() * d)(0);
  double want_var = 4.0 - (kab * kbb.inverse() * kab.transpose())(0);
  REQUIRE(gc.dim() == 1);
  CHECK(gc.labels[0] == 1);
  CHECK(gc.mean(0) == doctest::Approx(want_mean).epsilon(1e-10));
  CHECK(gc.cov(0, 0) == doctest::Approx(want_var).epsilon(1e-10));
}

TEST_CASE("conditioning agrees with a rejection-sampling oracle") {
  MatrixXd k(2, 2);
  k << 1.0, 0.6, 0.6, 1.0;
  GaussianSpec gs;
  gs.labels = {1, 2};
  gs.cov = k;
  gs.mean = VectorXd::Zero(2);
  VectorXd y(1);
  y << 0.8;
  GaussianSpec gc = condition_gaussian(gs, {1}, y);

  // Sample (z1, z2), keep z1 where |z2 - 0.8| < eps, compare moments.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Eigen::LLT<MatrixXd> llt(k);
  MatrixXd l = llt.matrixL();
  double sum = 0, sumsq = 0;
  long kept = 0;
  for (long i = 0; i < 4000000; ++i) {
    VectorXd u(2);
    u << nd(rng), nd(rng);
    VectorXd z = l * u;
    if (std::fabs(z(1) - 0.8) < 0.01) {
      sum += z(0);
      sumsq += z(0) * z(0);
      ++kept;
    }
  }
  REQUIRE(kept > 5000);
  double m = sum / static_cast<double>(kept);
  double v = sumsq / static_cast<double>(kept) - m * m;
  CHECK(gc.mean(0) == doctest::Approx(m).epsilon(0.05));
  CHECK(gc.cov(0, 0) == doctest::Approx(v).epsilon(0.08));
}

TEST_CASE("conditional matrix law reproduces the constraints") {
  std::mt19937_64 rng(17);
  const int n = 6, m = 5, k = 2, j = 2;
  for (int trial = 0; trial < 10; ++trial) {
    MatrixXd a = random_matrix(rng, n, m);  // stand-in for the observed matrix
    MatrixXd q = random_matrix(rng, m, k);
    MatrixXd p = random_matrix(rng, n, j);
    MatrixXd y = a * q;
    MatrixXd x = a.transpose() * p;
    MatrixConditioning mc = conditional_matrix_law(n, m, 1.0, q, y, p, x);
    // The mean matrix must satisfy both observation systems.
    CHECK((mc.E * q - y).norm() < 1e-8 * (1.0 + y.norm()));
    CHECK((mc.E.transpose() * p - x).norm() < 1e-8 * (1.0 + x.norm()));
    // Projectors are idempotent and symmetric.
    CHECK((mc.proj_left * mc.proj_left - mc.proj_left).norm() < 1e-8);
    CHECK((mc.proj_right * mc.proj_right - mc.proj_right).norm() < 1e-8);
    CHECK((mc.proj_left - mc.proj_left.transpose()).norm() < 1e-8);
    CHECK((mc.proj_right - mc.proj_right.transpose()).norm() < 1e-8);
    // Fluctuations vanish along the observed directions.
    CHECK((mc.proj_right * q).norm() < 1e-8 * (1.0 + q.norm()));
    CHECK((mc.proj_left * p).norm() < 1e-8 * (1.0 + p.norm()));
  }
}

TEST_CASE("stein derivative agrees with direct differentiation") {
  GaussianSpec gs = spec2(1.2, 0.4, 0.9);
  ExprPtr f = make_apply({"mul", {}, -1},
                         {make_apply({"tanh", {}, -1}, {make_leaf(1)}),
                          make_leaf(2)});
  // Two routes: the engine's Stein identity and symbolic differentiation.
  double via_stein = stein_derivative(f, gs, 1, ExpectationMethod::quad(60));
  ExprPtr df = derivative(f, 1, Registry::standard());
  double direct = expect_scalar(df, gs, ExpectationMethod::quad(60));
  CHECK(via_stein == doctest::Approx(direct).epsilon(1e-6));

  double via_stein2 = stein_derivative(f, gs, 2, ExpectationMethod::quad(60));
  ExprPtr df2 = derivative(f, 2, Registry::standard());
  double direct2 = expect_scalar(df2, gs, ExpectationMethod::quad(60));
  CHECK(via_stein2 == doctest::Approx(direct2).epsilon(1e-6));
}

TEST_CASE("psd factor tolerates slightly indefinite inputs") {
  MatrixXd k(2, 2);
  k << 1.0, 1.0, 1.0, 1.0 - 1e-12;  // indefinite at roundoff scale
  MatrixXd f = psd_factor(k);
  CHECK((f * f.transpose() - k).norm() < 1e-6);
  MatrixXd bad(1, 1);
  bad << -1.0;
  CHECK_THROWS(psd_factor(bad));
}
