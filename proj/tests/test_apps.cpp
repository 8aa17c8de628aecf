#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>

#include "tp/apps.hpp"
#include "tp/limits.hpp"
#include "tp/nonlin.hpp"
#include "tp/program.hpp"

using namespace tp;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::vector<VectorXd> fixed_inputs(int count, int dim, unsigned seed = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<VectorXd> xs;
  for (int i = 0; i < count; ++i) {
    VectorXd x(dim);
    for (int j = 0; j < dim; ++j) x(j) = nd(rng);
    xs.push_back(x);
  }
  return xs;
}

ArchSpec base_arch(Arch v, int depth = 2) {
  ArchSpec a;
  a.variant = v;
  a.depth = depth;
  a.activation = "tanh";
  a.sigma_w = {1.2};
  a.sigma_b = {0.3};
  a.inputs = fixed_inputs(2, 5);
  return a;
}

MatrixXd input_gram(const std::vector<VectorXd>& xs) {
  const int b = static_cast<int>(xs.size());
  MatrixXd g(b, b);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j)
      g(i, j) = xs[static_cast<size_t>(i)].dot(xs[static_cast<size_t>(j)]) /
                static_cast<double>(xs[0].size());
  return g;
}

}  // namespace

TEST_CASE("all architecture builders emit valid programs") {
  for (Arch v : {Arch::Mlp, Arch::MlpBackward, Arch::Resnet, Arch::SimpleRnn,
                 Arch::BatchnormForward, Arch::Cnn1dCircular}) {
    ArchSpec a = base_arch(v, 2);
    if (v == Arch::Resnet) {
      a.sigma_v = {0.8};
      a.sigma_a = {0.1};
    }
    if (v == Arch::Cnn1dCircular) {
      a.pixels = 3;
      a.inputs = fixed_inputs(3, 5);
    }
    BuiltProgram bp = build_program(a);
    CAPTURE(static_cast<int>(v));
    CHECK(validate(bp.sk, bp.lam).empty());
    CHECK(bp.cdc.num_classes() >= 1);
    CHECK(!bp.preact.empty());
  }
}

TEST_CASE("linear networks keep the input gram fixed") {
  ArchSpec a = base_arch(Arch::Mlp, 3);
  a.activation = "id";
  a.sigma_w = {1.0};
  a.sigma_b = {0.0};
  std::vector<MatrixXd> sigma = mlp_sigma(a, ExpectationMethod::quad(40));
  MatrixXd g = input_gram(a.inputs);
  REQUIRE(sigma.size() == 4);  // 3 hidden + readout
  for (const MatrixXd& s : sigma) CHECK((s - g).norm() < 1e-8);
}

TEST_CASE("relu at he initialization preserves diagonal signal") {
  ArchSpec a = base_arch(Arch::Mlp, 4);
  a.activation = "relu";
  a.sigma_w = {std::numbers::sqrt2};
  a.sigma_b = {0.0};
  std::vector<MatrixXd> sigma = mlp_sigma(a, ExpectationMethod::quad(60));
  // Sigma^1 = 2 * gram; every later layer keeps the diagonal fixed because
  // 2 * E relu(z)^2 = var z.
  for (const MatrixXd& s : sigma) {
    CHECK(s(0, 0) == doctest::Approx(sigma[0](0, 0)).epsilon(1e-7));
    CHECK(s(1, 1) == doctest::Approx(sigma[0](1, 1)).epsilon(1e-7));
  }
}

TEST_CASE("forward kernels match the limit engine on the built program") {
  ArchSpec a = base_arch(Arch::Mlp, 3);
  BuiltProgram bp = build_program(a);
  std::vector<MatrixXd> sigma = mlp_sigma(a, ExpectationMethod::quad(40));
  auto [table, diag] = compute_limits_no_transpose(
      bp.sk, bp.cdc, bp.spec, ExpectationMethod::quad(40));
  for (int l = 1; l <= a.depth; ++l)
    for (int i = 0; i < 2; ++i)
      for (int j = i; j < 2; ++j)
        // The routes parameterize the quadrature differently, so agreement
        // is limited by the truncation error of tanh at this order.
        CHECK(table.k_of(bp.preact.at({l, i}), bp.preact.at({l, j})) ==
              doctest::Approx(sigma[static_cast<size_t>(l) - 1](i, j))
                  .epsilon(5e-4));
}

TEST_CASE("one-layer linear tangent kernel has the hand value") {
  ArchSpec a;
  a.variant = Arch::Mlp;
  a.depth = 1;
  a.activation = "id";
  a.sigma_w = {1.0};
  a.sigma_b = {1.0};
  a.inputs = fixed_inputs(2, 4);
  MatrixXd k = mlp_ntk(a, ExpectationMethod::quad(40));
  MatrixXd g = input_gram(a.inputs);
  MatrixXd sigma1 = g + MatrixXd::Ones(2, 2);
  CHECK((k - 2.0 * sigma1).norm() < 1e-8);
}

TEST_CASE("tangent kernels are symmetric and positive semidefinite") {
  ArchSpec a = base_arch(Arch::Mlp, 3);
  a.inputs = fixed_inputs(5, 6, 33);
  MatrixXd k = mlp_ntk(a, ExpectationMethod::quad(40));
  CHECK((k - k.transpose()).norm() < 1e-10);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(k);
  CHECK(es.eigenvalues().minCoeff() > -1e-9);
}

TEST_CASE("pooled readout corrections vanish for odd activations") {
  // For phi = id the mean corrections are zero and the pooled kernel has the
  // closed form 2 * gram + 2 * ones at sigma_w = 1, sigma_b = 0, depth 2.
  ArchSpec a;
  a.variant = Arch::Mlp;
  a.depth = 2;
  a.activation = "id";
  a.sigma_w = {1.0};
  a.sigma_b = {0.0};
  a.inputs = fixed_inputs(2, 4);
  MatrixXd k = mlp_ntk_gmp(a, ExpectationMethod::quad(40));
  MatrixXd g = input_gram(a.inputs);
  MatrixXd want = 2.0 * g + 2.0 * MatrixXd::Ones(2, 2);
  CHECK((k - want).norm() < 1e-8);
}

TEST_CASE("relu registers the dirac second-derivative mean") {
  const Nonlinearity& relu = Registry::standard().at("relu");
  REQUIRE(static_cast<bool>(relu.second_derivative_gaussian_mean));
  for (double var : {0.5, 1.0, 2.5})
    CHECK(relu.second_derivative_gaussian_mean(var, {}) ==
          doctest::Approx(1.0 / std::sqrt(2.0 * std::numbers::pi * var))
              .epsilon(1e-12));
}

TEST_CASE("backward kernels obey the layerwise product rule") {
  // For the MLP, Pi^l = sigma_w^2 V phi'(Sigma^{l+1}) . Pi^{l+1} at equal
  // widths; check against a direct evaluation of the recursion.
  ArchSpec a = base_arch(Arch::MlpBackward, 3);
  SignalProp sp = signal_prop(a, true, ExpectationMethod::quad(60));
  REQUIRE(sp.sigma.size() >= 3);
  REQUIRE(sp.pi.size() == 3);
  const double sw2 = 1.2 * 1.2;
  CHECK((sp.pi[2] - sw2 * MatrixXd::Ones(2, 2)).norm() < 1e-10);
  auto dtanh = [](double x) {
    double t = std::tanh(x);
    return 1.0 - t * t;
  };
  for (int l = 1; l >= 0; --l) {
    MatrixXd vd = v_op(dtanh, sp.sigma[static_cast<size_t>(l) + 1],
                       ExpectationMethod::quad(60));
    MatrixXd want =
        sw2 * vd.cwiseProduct(sp.pi[static_cast<size_t>(l) + 1]);
    CHECK((sp.pi[static_cast<size_t>(l)] - want).norm() < 1e-8);
  }
}

TEST_CASE("residual networks with a dead branch accumulate only skip bias") {
  ArchSpec a = base_arch(Arch::Resnet, 3);
  a.sigma_v = {0.0};
  a.sigma_a = {0.5};
  SignalProp sp = signal_prop(a, false, ExpectationMethod::quad(40));
  REQUIRE(sp.sigma_skip.size() >= 3);
  for (size_t l = 1; l < sp.sigma_skip.size(); ++l) {
    MatrixXd want = sp.sigma_skip[l - 1] + 0.25 * MatrixXd::Ones(2, 2);
    CHECK((sp.sigma_skip[l] - want).norm() < 1e-9);
  }
  CHECK(sp.pi.empty());
}

TEST_CASE("batchnorm propagates forward and refuses backward") {
  ArchSpec a = base_arch(Arch::BatchnormForward, 2);
  a.inputs = fixed_inputs(4, 6);
  SignalProp sp = signal_prop(a, false, ExpectationMethod::mc(200000, 2));
  REQUIRE(!sp.sigma.empty());
  // The normalized batch has unit average diagonal under B phi = phi o norm
  // with phi = tanh bounded by 1.
  CHECK(sp.sigma.back().rows() == 4);
  CHECK_THROWS_AS(signal_prop(a, true, ExpectationMethod::mc(100000, 2)),
                  std::invalid_argument);
}

TEST_CASE("tied and untied recurrent weights share the forward limit") {
  ArchSpec a = base_arch(Arch::SimpleRnn, 3);
  a.inputs = fixed_inputs(3, 5);
  BuiltProgram tied = build_program(a);
  ArchSpec au = a;
  au.rnn_tied = false;
  BuiltProgram untied = build_program(au);
  auto [tt, td] = compute_limits_no_transpose(tied.sk, tied.cdc, tied.spec,
                                              ExpectationMethod::quad(60));
  auto [ut, ud] = compute_limits_no_transpose(
      untied.sk, untied.cdc, untied.spec, ExpectationMethod::quad(60));
  for (int t = 1; t <= a.depth; ++t) {
    CHECK(tt.k_of(tied.preact.at({t, 0}), tied.preact.at({t, 0})) ==
          doctest::Approx(ut.k_of(untied.preact.at({t, 0}),
                                  untied.preact.at({t, 0})))
              .epsilon(1e-4));
  }
}

TEST_CASE("cnn kernels match the limit engine on the built program") {
  ArchSpec a;
  a.variant = Arch::Cnn1dCircular;
  a.depth = 2;
  a.pixels = 3;
  a.activation = "tanh";
  a.sigma_w = {1.1};
  a.inputs = fixed_inputs(3, 5);
  BuiltProgram bp = build_program(a);
  SignalProp sp = signal_prop(a, false, ExpectationMethod::quad(40));
  auto [table, diag] = compute_limits_no_transpose(
      bp.sk, bp.cdc, bp.spec, ExpectationMethod::quad(40));
  for (int p = 0; p < 3; ++p)
    for (int q = p; q < 3; ++q)
      // The two routes parameterize the quadrature differently (joint vs
      // per-pair), so they agree only to the truncation error of tanh.
      CHECK(table.k_of(bp.preact.at({2, p}), bp.preact.at({2, q})) ==
            doctest::Approx(sp.sigma[1](p, q)).epsilon(5e-4));
}

TEST_CASE("semicircle moments are catalan numbers") {
  CHECK(goe_moment(1) == 0.0);
  CHECK(goe_moment(2) == 1.0);
  CHECK(goe_moment(3) == 0.0);
  CHECK(goe_moment(4) == 2.0);
  CHECK(goe_moment(5) == 0.0);
  CHECK(goe_moment(6) == 5.0);
  CHECK(goe_moment(8) == 14.0);
  CHECK(goe_moment(10) == 42.0);
}

TEST_CASE("marchenko-pastur recurrence equals the closed form") {
  for (double alpha : {0.5, 1.0, 2.0, 3.7}) {
    for (int k = 1; k <= 8; ++k) {
      CHECK(mp_moment(k, alpha) ==
            doctest::Approx(mp_moment_closed(k, alpha)).epsilon(1e-12));
    }
  }
  // Square case: moments of the squared semicircle are catalan numbers.
  CHECK(mp_moment(1, 1.0) == doctest::Approx(1.0));
  CHECK(mp_moment(2, 1.0) == doctest::Approx(2.0));
  CHECK(mp_moment(3, 1.0) == doctest::Approx(5.0));
  CHECK(mp_moment(4, 1.0) == doctest::Approx(14.0));
}

TEST_CASE("amp trajectories are bit-reproducible") {
  AmpConfig cfg;
  cfg.N = 500;
  cfg.steps = 4;
  cfg.seed = 9;
  AmpTrajectory a = amp_run(cfg);
  AmpTrajectory b = amp_run(cfg);
  CHECK(a.h_sq == b.h_sq);
  CHECK(a.xi == b.xi);
  cfg.seed = 10;
  AmpTrajectory c = amp_run(cfg);
  CHECK(a.h_sq != c.h_sq);
}

TEST_CASE("linear amp matches state evolution in one step") {
  AmpConfig cfg;
  cfg.f = {"amp_linear", {}, -1};
  cfg.g = {"add2", {}, -1};
  cfg.steps = 1;
  cfg.N = 20000;
  cfg.delta = 0.64;
  cfg.sigma_x0 = 1.0;
  cfg.sigma_w = 0.1;
  AmpStateEvolution se = amp_state_evolution(cfg);
  // sigma_0^2 = E x0^2 / delta; tau_0^2 = sigma_0^2 + sigma_w^2.
  CHECK(se.sigma_sq[0] == doctest::Approx(1.0 / 0.64).epsilon(1e-10));
  CHECK(se.tau_sq[0] == doctest::Approx(1.0 / 0.64 + 0.01).epsilon(1e-10));
  double acc = 0;
  const int trials = 5;
  for (int t = 0; t < trials; ++t) {
    AmpConfig c = cfg;
    c.seed = 100 + static_cast<std::uint64_t>(t);
    acc += amp_run(c).h_sq[0];
  }
  CHECK(acc / trials == doctest::Approx(se.tau_sq[0]).epsilon(0.03));
}

TEST_CASE("soft-threshold amp tracks state evolution") {
  AmpConfig cfg;
  cfg.N = 4000;
  cfg.steps = 6;
  AmpStateEvolution se = amp_state_evolution(cfg);
  std::vector<double> mean(static_cast<size_t>(cfg.steps), 0.0);
  const int trials = 6;
  for (int t = 0; t < trials; ++t) {
    AmpConfig c = cfg;
    c.seed = 50 + static_cast<std::uint64_t>(t);
    AmpTrajectory tr = amp_run(c);
    for (int s = 0; s < cfg.steps; ++s)
      mean[static_cast<size_t>(s)] += tr.h_sq[static_cast<size_t>(s)] / trials;
  }
  for (int s = 0; s < cfg.steps; ++s)
    CHECK(mean[static_cast<size_t>(s)] ==
          doctest::Approx(se.tau_sq[static_cast<size_t>(s)]).epsilon(0.05));
}
