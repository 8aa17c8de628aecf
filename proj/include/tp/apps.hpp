#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tp/cdc.hpp"
#include "tp/gaussian.hpp"
#include "tp/program.hpp"

// Program builders for standard architectures and the closed-form quantities
// they converge to: GP kernels, neural tangent kernels, forward/backward
// signal propagation, random-matrix moments, and approximate message passing
// with its state evolution.

namespace tp {

enum class Arch {
  Mlp,
  MlpBackward,
  Resnet,
  SimpleRnn,
  BatchnormForward,
  Cnn1dCircular,
};

struct ArchSpec {
  Arch variant = Arch::Mlp;
  int depth = 2;                 // hidden layers L (rnn: steps; cnn: layers)
  std::string activation = "tanh";
  // Per-layer deviations; size 1 broadcasts, empty means 1 (sigma_w) / 0
  // (sigma_b).  sigma_w has a final readout entry (index L) when given in
  // full, i.e. size L+1.
  std::vector<double> sigma_w;
  std::vector<double> sigma_b;
  std::vector<double> sigma_v;      // resnet residual-branch weights
  std::vector<double> sigma_a;      // resnet skip biases
  std::vector<double> layer_scale;  // width of layer l / base width; default 1
  // Inputs: mlp/resnet/batchnorm take one vector per network input; cnn takes
  // the pixel vectors of a single 1-d signal; rnn takes the per-step inputs.
  std::vector<Eigen::VectorXd> inputs;
  bool rnn_tied = true;
  int pixels = 3;  // cnn pixel count (kernel taps {0, 1}, circular)
};

struct BuiltProgram {
  Skeleton sk;
  DimConstraints lam;
  SamplingSpec spec;
  CdcPartition cdc;
  // Handles keyed by (layer-or-step-or-pixel index, input index).
  std::map<std::pair<int, int>, int> preact;    // G line of h^l(x_a)
  std::map<std::pair<int, int>, int> act;       // H line of phi(h^l(x_a))
  std::map<std::pair<int, int>, int> grad_act;  // activation-gradient G line
  std::map<std::pair<int, int>, int> grad_pre;  // preactivation-gradient line
  int fwd_size = 0;  // lines 1..fwd_size form the forward pass
};

BuiltProgram build_program(const ArchSpec& a);

// GP kernel recursion for the MLP: returns Sigma^1..Sigma^{L+1} over the
// input set (the last entry is the readout-layer kernel).
std::vector<Eigen::MatrixXd> mlp_sigma(const ArchSpec& a,
                                       ExpectationMethod method = {},
                                       const Registry& reg = Registry::standard());

// Limit of <grad_theta f(x_a), grad_theta f(x_b)> at initialization for the
// MLP with scalar readout.
Eigen::MatrixXd mlp_ntk(const ArchSpec& a, ExpectationMethod method = {},
                        const Registry& reg = Registry::standard());

// Same with a global-mean-pooling readout (kernel scaled by the last hidden
// width); includes the mean-correction terms, which vanish for odd
// activations and have a closed form for relu.
Eigen::MatrixXd mlp_ntk_gmp(const ArchSpec& a, ExpectationMethod method = {},
                            const Registry& reg = Registry::standard());

struct SignalProp {
  std::vector<Eigen::MatrixXd> sigma;       // forward kernels per layer
  std::vector<Eigen::MatrixXd> sigma_skip;  // resnet only: skip-path kernels
  std::vector<Eigen::MatrixXd> pi;          // backward kernels where defined
};

// Forward Sigma (and, for mlp/cnn, backward Pi) recursions.  Batchnorm is
// forward-only: requesting Pi throws (its Jacobian is singular at the
// origin, so the backward limit is not available).
SignalProp signal_prop(const ArchSpec& a, bool want_pi = true,
                       ExpectationMethod method = {},
                       const Registry& reg = Registry::standard());

// k-th limit moment of the symmetrized random matrix A + A^T (semicircle):
// Catalan(k/2) for even k, 0 for odd, via the coefficient recursion solved
// in integer arithmetic.
double goe_moment(int k);

// k-th limit moment of (1/n) Y Y^T with Y m x n, alpha = m/n
// (Marchenko-Pastur), via the coupled coefficient recurrence.
double mp_moment(int k, double alpha);
// Same moment from the closed-form sum; equals mp_moment to roundoff.
double mp_moment_closed(int k, double alpha);

// Power-iteration programs whose k-th chain moment realizes the above laws.
// The chain vars are recorded as preact[(j, 0)], j = 0..k.
BuiltProgram goe_program(int k);
BuiltProgram mp_program(int k, double alpha);

// Finite-width parameter-gradient Gram matrix <grad_theta f(x_a),
// grad_theta f(x_b)> for the MLP, averaged over independent parameter draws.
// With gmp the readout is global mean pooling and the Gram is scaled by the
// last hidden width, matching the pooled-kernel normalization.
Eigen::MatrixXd empirical_ntk(const ArchSpec& a, long width, int draws,
                              std::uint64_t seed, bool gmp = false,
                              const Registry& reg = Registry::standard());

struct AmpConfig {
  double delta = 0.64;     // n / N
  double sigma_x0 = 1.0;   // signal coordinate std
  double sigma_w = 0.1;    // noise coordinate std
  NonlinRef f = {"amp_denoise", {1.0}, -1};  // f_t(h, x0)
  NonlinRef g = {"add2", {}, -1};            // g_t(b, w)
  int steps = 10;
  long N = 4000;
  std::uint64_t seed = 0;
};

struct AmpTrajectory {
  // Index t = 0..T-1; h/q live in R^N, b/m in R^n.
  std::vector<double> h_sq;  // (1/N) sum (h^t)^2, starting at t = 1
  std::vector<double> q_sq;  // (1/N) sum (q^t)^2, starting at t = 0
  std::vector<double> b_sq;  // (1/n) sum (b^t)^2, starting at t = 0
  std::vector<double> m_sq;  // (1/n) sum (m^t)^2, starting at t = 0
  std::vector<double> xi;    // Onsager coefficients
  std::vector<double> lambda;
};

AmpTrajectory amp_run(const AmpConfig& cfg,
                      const Registry& reg = Registry::standard());

struct AmpStateEvolution {
  std::vector<double> sigma_sq;  // sigma_t^2, t = 0..T-1
  std::vector<double> tau_sq;    // tau_t^2, t = 0..T-1; Var h^{t+1} = tau_t^2
};

AmpStateEvolution amp_state_evolution(const AmpConfig& cfg,
                                      ExpectationMethod method = {},
                                      const Registry& reg = Registry::standard());

}  // namespace tp
