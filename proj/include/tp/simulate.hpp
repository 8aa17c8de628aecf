#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tp/cdc.hpp"
#include "tp/expr.hpp"
#include "tp/gaussian.hpp"
#include "tp/program.hpp"

// Finite-width realization and measurement.  All randomness is counter-based:
// every matrix entry and input coordinate is a pure function of (seed, line,
// index), so realizations are bit-reproducible and independent of evaluation
// order or thread count.

namespace tp {

// A random matrix is never materialized during evaluation; products stream
// its entries from the hash.  In coupled mode the key ignores the widths, so
// a smaller realization is the upper-left sub-block of a larger one (up to
// the 1/sqrt(n) scale).
struct MatrixRef {
  std::uint64_t key = 0;
  long rows = 0, cols = 0;
  double scale = 0;        // sigma / sqrt(cols)
  bool transposed = false; // entry (i,j) read as (j,i) of the base array
};

Eigen::MatrixXd materialize(const MatrixRef& ref);

struct Realization {
  std::vector<long> widths;            // per dimension class
  std::map<int, Eigen::VectorXd> vec;  // vector line -> values
  std::map<int, MatrixRef> mat;        // A line -> generator
  std::uint64_t seed = 0;
};

Realization realize(const Skeleton& sk, const CdcPartition& cdc,
                    const SamplingSpec& spec, const std::vector<long>& widths,
                    std::uint64_t seed, bool coupled = false,
                    const Registry& reg = Registry::standard());

// (1/n) sum_i phi over the aligned coordinates of the class's vectors.
double empirical_moment(const Realization& r, const CdcPartition& cdc, int cls,
                        const ExprPtr& phi,
                        const Registry& reg = Registry::standard());

struct ReportRow {
  std::string quantity;
  long width = 0;
  double empirical = 0;
  double stderr_ = 0;
  double theory = 0;
  double rel_err = 0;
};

struct SimulationReport {
  std::vector<ReportRow> rows;
  int trials = 0;
  std::vector<std::uint64_t> seeds;
};

struct StudyOptions {
  int trials = 10;
  std::uint64_t seed = 0;
  bool coupled = false;
  ExpectationMethod method = {};
  std::optional<double> theory;  // route auto-selected when absent
  std::string quantity = "phi";
};

// Mean/stderr of the empirical moment across independent trials per scheduled
// base width, with the theoretical limit attached (transpose-free programs
// use the direct recursion, others the detransposition route).
SimulationReport convergence_study(const Skeleton& sk, const CdcPartition& cdc,
                                   const SamplingSpec& spec, const ExprPtr& phi,
                                   const std::vector<long>& base_widths,
                                   const StudyOptions& opt = {},
                                   const Registry& reg = Registry::standard());

}  // namespace tp
