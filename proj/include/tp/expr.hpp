#pragma once

#include <map>
#include <memory>
#include <span>
#include <vector>

#include "tp/nonlin.hpp"
#include "tp/program.hpp"

// Expression DAGs over G-var leaves: the "expanded definitions" f^{h} of
// H-vars, plus affine combinations and symbolic first derivatives.

namespace tp {

struct ExprNode;
using ExprPtr = std::shared_ptr<const ExprNode>;

struct ExprNode {
  enum class Kind { Leaf, Affine, Apply };
  Kind kind = Kind::Leaf;
  int leaf = 0;                                   // Leaf: var line
  double constant = 0.0;                          // Affine
  std::vector<std::pair<double, ExprPtr>> terms;  // Affine
  NonlinRef fn;                                   // Apply
  std::vector<ExprPtr> args;                      // Apply
};

ExprPtr make_leaf(int line);
ExprPtr make_const(double c);
ExprPtr make_affine(std::vector<std::pair<double, ExprPtr>> terms,
                    double constant = 0.0);
ExprPtr make_apply(NonlinRef fn, std::vector<ExprPtr> args);

// Sorted unique leaf lines.
std::vector<int> expr_leaves(const ExprPtr& e);

// Replace leaves by expressions; leaves absent from the map stay leaves.
ExprPtr substitute(const ExprPtr& e, const std::map<int, ExprPtr>& repl);

// Expanded definition f^{v}: identity leaf for G-vars, composition over
// producing Nonlin/Comp lines for H-vars.  Throws for A-vars.
ExprPtr expand_definition(const Skeleton& sk, int var);

// Symbolic d e / d leaf.  Throws MissingDerivative when a nonlinearity on a
// dependent path has no registered weak derivative.
ExprPtr derivative(const ExprPtr& e, int leaf, const Registry& reg);

// A (LinComb-produced) G-var written as a linear combination of primitive
// G-vars (VecIn or MatMul lines): line -> coefficient.
std::map<int, double> linear_decompose(const Skeleton& sk, int g_line);

// Topologically flattened evaluator for repeated evaluation.
class CompiledExpr {
 public:
  CompiledExpr() = default;
  CompiledExpr(const ExprPtr& e, const Registry& reg);

  const std::vector<int>& leaf_lines() const { return leaf_lines_; }
  // values aligned with leaf_lines()
  double eval(std::span<const double> leaf_values) const;

 private:
  struct Step {
    ExprNode::Kind kind;
    int leaf_slot = 0;                            // Leaf
    double constant = 0.0;                        // Affine
    std::vector<std::pair<double, int>> terms;    // Affine: (coeff, step)
    const Nonlinearity* fn = nullptr;             // Apply
    NonlinRef ref;                                // Apply (params, deriv_arg)
    std::vector<int> args;                        // Apply: step indices
  };
  std::vector<int> leaf_lines_;
  std::vector<Step> steps_;
};

}  // namespace tp
