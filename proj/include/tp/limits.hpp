#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "tp/cdc.hpp"
#include "tp/expr.hpp"
#include "tp/gaussian.hpp"
#include "tp/program.hpp"

// Scaling-limit recursion: the per-dimension-class Gaussians N(mu^c, K^c)
// that coordinates of a program's vectors converge to as widths grow, for
// transpose-free programs and for backprop-style extensions where the only
// new matrices are transposes.

namespace tp {

struct LimitTable {
  std::map<int, double> mu;                  // G line -> mu entry
  std::map<std::pair<int, int>, double> k;   // sorted same-class pair -> K

  double mu_of(int g) const;
  double k_of(int a, int b) const;  // throws when the pair was not computed
};

struct RankDiagnostics {
  struct Entry {
    int matrix_line = 0;      // canonical A line of the shared matrix
    bool transposed = false;  // matrix used in transposed orientation
    Eigen::MatrixXd gram;     // E[f^a f^b] over args seen so far
    int rank = 0;
    bool stable = true;       // rank unchanged under cutoff perturbation
  };
  std::vector<Entry> entries;
  std::vector<std::string> warnings;
};

// Incremental evaluator of the mu/K recursion.  Lines must be processed in
// ascending order; the skeleton may grow between calls (detransposition
// appends lines and fills in correction coefficients as it goes).
class LimitEngine {
 public:
  LimitEngine(const Skeleton& sk, const CdcPartition& cdc,
              const SamplingSpec& spec, ExpectationMethod method = {},
              const Registry& reg = Registry::standard(),
              bool transposed_alpha = false);

  void process_line(int l);
  void process_all();

  const LimitTable& table() const { return table_; }
  RankDiagnostics take_diagnostics() { return std::move(diag_); }

  // N(mu, K) over the G lines of cls processed so far, labeled by line.
  GaussianSpec class_spec(int cls) const;

 private:
  struct MatrixId {
    int base = 0;
    bool transposed = false;
    bool operator<(const MatrixId& o) const {
      return base != o.base ? base < o.base : transposed < o.transposed;
    }
    bool operator==(const MatrixId&) const = default;
  };
  MatrixId resolve_matrix(int a_line) const;
  double matrix_factor(int a_line) const;
  double pair_k(int l, int m, const std::map<int, double>& gram_row,
                double branch4_scale) const;

  const Skeleton& sk_;
  const CdcPartition& cdc_;
  const SamplingSpec& spec_;
  ExpectationMethod method_;
  const Registry& reg_;
  bool transposed_alpha_;

  LimitTable table_;
  std::vector<std::vector<int>> processed_;        // class -> G lines, in order
  std::map<MatrixId, std::vector<int>> matmuls_;   // matrix -> MatMul lines
  std::map<MatrixId, int> last_rank_;
  RankDiagnostics diag_;
  int next_line_ = 1;
};

std::pair<LimitTable, RankDiagnostics> compute_limits_no_transpose(
    const Skeleton& sk, const CdcPartition& cdc, const SamplingSpec& spec,
    ExpectationMethod method = {}, const Registry& reg = Registry::standard());

// Extension validity per the backprop theorem's hypotheses: new MatMul lines
// use transposed input matrices with new vector arguments, new vector inputs
// are zero-mean and independent of the old ones, and every new vector is an
// odd function of the new inputs (checked numerically on a scalar surrogate).
std::vector<Diagnostic> check_extension(const Skeleton& fwd,
                                        const Skeleton& ext,
                                        const SamplingSpec& spec,
                                        const Registry& reg = Registry::standard(),
                                        std::uint64_t seed = 0);

std::pair<LimitTable, RankDiagnostics> compute_limits_backprop(
    const Skeleton& fwd, const Skeleton& ext, const CdcPartition& cdc,
    const SamplingSpec& spec, ExpectationMethod method = {},
    const Registry& reg = Registry::standard());

// E phi(Z), Z ~ N(mu^c, K^c) over the G lines of cls.
double limit_moment(const LimitTable& table, const CdcPartition& cdc, int cls,
                    const ExprPtr& phi, ExpectationMethod method = {},
                    const Registry& reg = Registry::standard());

}  // namespace tp
