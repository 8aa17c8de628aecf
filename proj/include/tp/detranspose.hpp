#pragma once

#include <map>
#include <vector>

#include "tp/cdc.hpp"
#include "tp/limits.hpp"
#include "tp/program.hpp"

// Detransposition: compile an original-syntax program that uses transposes
// into an extended-syntax transpose-free check program.  Each transpose
// becomes a fresh input matrix with rescaled sigma; each product g := A h
// gains a correction term a over the arguments of earlier products by the
// opposite orientation of the same matrix, with a = alpha C+ v computed from
// the check program's own limit recursion.

namespace tp {

struct CoeffRecord {
  std::vector<int> h_args;    // original arg vars of the opposite products
  std::vector<int> g_results; // original result vars of those products
  Eigen::MatrixXd C;          // E[f^{phi(h^i)} f^{phi(h^j)}]
  Eigen::VectorXd v;          // E[f^{phi_g(g^i)} f^{phi(h^m)}]
  Eigen::VectorXd a;
  double alpha = 1.0;
};

struct DetransposeResult {
  Skeleton check_sk;  // extended syntax, no Transpose lines
  DimConstraints check_lam;
  SamplingSpec check_spec;
  CdcPartition check_cdc;
  std::map<int, int> phi;            // original var line -> check var line
  std::map<int, int> phi_g;          // original product line -> check G line
  std::map<int, CoeffRecord> coeffs; // original product line -> record
  std::map<int, int> fresh_source;   // check input-matrix line -> transpose line
  LimitTable table;                  // limits of the check program
  RankDiagnostics diag;
};

DetransposeResult detranspose(const Skeleton& sk, const CdcPartition& cdc,
                              const SamplingSpec& spec,
                              ExpectationMethod method = {},
                              const Registry& reg = Registry::standard(),
                              const DimConstraints& lam = {});

// Same transform with a computed by the derivative rule
// a_i = alpha * sigma^2 * E[d f^{phi(h^m)} / d Z^{phi_g(g^i)}], sigma taken
// from the check matrix standing in for the opposite orientation.
DetransposeResult detranspose_derivative(
    const Skeleton& sk, const CdcPartition& cdc, const SamplingSpec& spec,
    ExpectationMethod method = {}, const Registry& reg = Registry::standard(),
    const DimConstraints& lam = {});

// Limit of (1/n) sum_i phi over coordinates of the vars in the closure of
// cls; phi's leaves are original var lines (G or H).
double general_limit_moment(const Skeleton& sk, const CdcPartition& cdc,
                            const SamplingSpec& spec, int cls,
                            const ExprPtr& phi, ExpectationMethod method = {},
                            const Registry& reg = Registry::standard());

// Same, over an already-computed detransposition.
double general_limit_moment(const DetransposeResult& res, const ExprPtr& phi,
                            ExpectationMethod method = {},
                            const Registry& reg = Registry::standard());

}  // namespace tp
