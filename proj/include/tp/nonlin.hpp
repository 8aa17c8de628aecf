#pragma once

#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tp/program.hpp"

// Registry of coordinatewise nonlinearities.  Entries carry weak derivatives
// where they exist as functions; relu additionally registers the Gaussian
// mean of its distributional second derivative (a Dirac delta at 0), used by
// the global-mean-pooling NTK corrections.

namespace tp {

struct Nonlinearity {
  std::string name;
  int arity = 1;           // -1: variadic (affine, batchnorm)
  int poly_degree = 1;     // documented polynomial growth bound
  bool odd = false;
  std::function<double(std::span<const double>, std::span<const double>)> forward;
  // partial(i, x, params) = d forward / d x_i; null when no weak derivative.
  std::function<double(int, std::span<const double>, std::span<const double>)> partial;
  std::vector<bool> partial_defined;  // empty: all partials defined (if partial)
  // E[f''(z)] for z ~ N(0, var); closed form for distributional second
  // derivatives of unary functions (relu -> standard normal density at 0).
  std::function<double(double, std::span<const double>)> second_derivative_gaussian_mean;
  std::vector<double> kinks;  // finite-difference checks avoid these points

  bool has_partial(int i) const {
    if (!partial) return false;
    if (partial_defined.empty()) return true;
    return i < static_cast<int>(partial_defined.size()) && partial_defined[static_cast<size_t>(i)];
  }
};

struct UnknownNonlinearity : std::runtime_error {
  explicit UnknownNonlinearity(const std::string& name)
      : std::runtime_error("unknown nonlinearity '" + name + "'") {}
};
struct MissingDerivative : std::runtime_error {
  explicit MissingDerivative(const std::string& what)
      : std::runtime_error("missing derivative: " + what) {}
};

class Registry {
 public:
  static const Registry& standard();

  bool has(const std::string& name) const { return table_.count(name) > 0; }
  const Nonlinearity& at(const std::string& name) const;
  void add(Nonlinearity fn) { table_[fn.name] = std::move(fn); }

 private:
  std::map<std::string, Nonlinearity> table_;
};

// Evaluate a NonlinRef (honoring deriv_arg) at a point.
double apply_fn(const Registry& reg, const NonlinRef& ref,
                std::span<const double> x);

}  // namespace tp
