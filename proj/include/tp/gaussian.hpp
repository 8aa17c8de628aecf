#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <vector>

#include "tp/expr.hpp"

// Gaussian numeric primitives: expectations of expression DAGs under a
// multivariate Gaussian (tensor Gauss-Hermite quadrature in low effective
// dimension, chunked Monte Carlo otherwise), the V operator, pseudoinverse,
// Gaussian conditioning, the conditioned-matrix law, and Stein-lemma
// derivative estimation.

namespace tp {

inline constexpr double kPsdTolFactor = 1e-8;    // relative to max diagonal
inline constexpr double kPinvCutoff = 1e-10;     // relative to sigma_max
inline constexpr int kQuadDimMax = 3;
inline constexpr int kQuadPointsDefault = 40;
inline constexpr long long kMcSamplesDefault = 200000;

struct GaussianSpec {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::vector<int> labels;  // coordinate -> G-var line

  int dim() const { return static_cast<int>(labels.size()); }
  int index_of(int label) const;  // -1 if absent
};

struct ExpectationMethod {
  enum class Kind { Auto, Quadrature, MonteCarlo };
  Kind kind = Kind::Auto;
  int points = kQuadPointsDefault;
  long long samples = kMcSamplesDefault;
  std::uint64_t seed = 0;
  bool parallel = true;

  static ExpectationMethod quad(int pts = kQuadPointsDefault) {
    return {Kind::Quadrature, pts, kMcSamplesDefault, 0, true};
  }
  static ExpectationMethod mc(long long n = kMcSamplesDefault,
                              std::uint64_t seed = 0, bool parallel = true) {
    return {Kind::MonteCarlo, kQuadPointsDefault, n, seed, parallel};
  }
};

struct ExpectResult {
  Eigen::MatrixXd gram;  // E[f_i f_j]
  Eigen::VectorXd mean;  // E[f_i]
};

// Joint moments of expression DAGs under Z ~ N(mean, cov).  Only coordinates
// reachable from the DAG leaves are integrated.
ExpectResult expect(const std::vector<ExprPtr>& fns, const GaussianSpec& gs,
                    const ExpectationMethod& method = {},
                    const Registry& reg = Registry::standard());

double expect_scalar(const ExprPtr& fn, const GaussianSpec& gs,
                     const ExpectationMethod& method = {},
                     const Registry& reg = Registry::standard());

// V operator: E[phi(z_i) phi(z_j)] over z ~ N(0, Sigma), entrywise.
Eigen::MatrixXd v_op(const std::function<double(double)>& phi,
                     const Eigen::MatrixXd& sigma,
                     const ExpectationMethod& method = {});
// Mixed version E[phi(z_i) psi(z_j)] (not symmetric in general).
Eigen::MatrixXd v_op_mixed(const std::function<double(double)>& phi,
                           const std::function<double(double)>& psi,
                           const Eigen::MatrixXd& sigma,
                           const ExpectationMethod& method = {});
// Vector-valued version for batchnorm-style Phi: R^B -> R^B.
Eigen::MatrixXd v_op_vector(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& phi,
    const Eigen::MatrixXd& sigma, const ExpectationMethod& method = {});

Eigen::MatrixXd pinv(const Eigen::MatrixXd& m, double rel_cutoff = kPinvCutoff);

// Condition N(mean, cov) on Z[observed] = values.
GaussianSpec condition_gaussian(const GaussianSpec& gs,
                                const std::vector<int>& observed,
                                const Eigen::VectorXd& values);

struct MatrixConditioning {
  Eigen::MatrixXd E;
  Eigen::MatrixXd proj_left;   // I - P P+
  Eigen::MatrixXd proj_right;  // I - Q Q+
};

// Law of an iid N(0, sigma^2) matrix A conditioned on AQ = Y and A^T P = X:
// E + proj_left * Atilde * proj_right with Atilde a fresh copy.
MatrixConditioning conditional_matrix_law(int n, int m, double sigma,
                                          const Eigen::MatrixXd& Q,
                                          const Eigen::MatrixXd& Y,
                                          const Eigen::MatrixXd& P,
                                          const Eigen::MatrixXd& X,
                                          double tol = 1e-8);

// E[d fn / d z_wrt]: direct expectation of the symbolic derivative when
// available, otherwise Stein inversion  E[grad f] = K+ E[Z f].
double stein_derivative(const ExprPtr& fn, const GaussianSpec& gs,
                        int wrt_label, const ExpectationMethod& method = {},
                        const Registry& reg = Registry::standard());

// E[d fn / d leaf] for every leaf of fn, by the same two routes.
// Leaves are returned in expr_leaves order.
Eigen::VectorXd expected_gradient(const ExprPtr& fn, const GaussianSpec& gs,
                                  const ExpectationMethod& method = {},
                                  const Registry& reg = Registry::standard());

// Eigenvalue-clipped symmetric factor L with L L^T ~= cov (rank columns).
Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& cov);

// Probabilists' Gauss-Hermite nodes and weights (weights sum to 1).
void gauss_hermite(int n, std::vector<double>& nodes,
                   std::vector<double>& weights);

}  // namespace tp
