#include "tp/nonlin.hpp"

#include <cmath>

namespace tp {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kTwoOverSqrtPi = 1.1283791670955125738961589031215;

double sgn(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

Nonlinearity unary(std::string name, int degree, bool odd,
                   std::function<double(double)> f,
                   std::function<double(double)> df = nullptr,
                   std::vector<double> kinks = {}) {
  Nonlinearity n;
  n.name = std::move(name);
  n.arity = 1;
  n.poly_degree = degree;
  n.odd = odd;
  n.forward = [f](std::span<const double> x, std::span<const double>) {
    return f(x[0]);
  };
  if (df)
    n.partial = [df](int, std::span<const double> x, std::span<const double>) {
      return df(x[0]);
    };
  n.kinks = std::move(kinks);
  return n;
}

// f(x, y) = phi'(x) * y, the backprop composite for activation phi.
Nonlinearity backprop(std::string name, std::function<double(double)> dphi,
                      std::function<double(double)> ddphi,
                      std::vector<double> kinks = {}) {
  Nonlinearity n;
  n.name = std::move(name);
  n.arity = 2;
  n.poly_degree = 2;
  n.forward = [dphi](std::span<const double> x, std::span<const double>) {
    return dphi(x[0]) * x[1];
  };
  n.partial = [dphi, ddphi](int i, std::span<const double> x,
                            std::span<const double>) {
    if (i == 0) {
      if (!ddphi) throw MissingDerivative("second derivative of activation");
      return ddphi(x[0]) * x[1];
    }
    return dphi(x[0]);
  };
  n.partial_defined = {ddphi != nullptr, true};
  n.kinks = std::move(kinks);
  return n;
}

Nonlinearity batchnorm(std::string name, std::function<double(double)> act) {
  Nonlinearity n;
  n.name = std::move(name);
  n.arity = -1;
  n.poly_degree = 1;
  // params = {slot}; normalizes the batch (x_1..x_B) and applies act to slot.
  n.forward = [act](std::span<const double> x, std::span<const double> p) {
    const int b = static_cast<int>(x.size());
    const int slot = static_cast<int>(p.empty() ? 0 : p[0]);
    double m = 0;
    for (double v : x) m += v;
    m /= b;
    double ss = 0;
    for (double v : x) ss += (v - m) * (v - m);
    const double s = std::sqrt(ss / b);
    if (s == 0.0) return act(0.0);
    return act((x[static_cast<size_t>(slot)] - m) / s);
  };
  return n;
}

Registry build_standard() {
  Registry reg;

  reg.add(unary("id", 1, true, [](double x) { return x; },
                [](double) { return 1.0; }));
  {
    Nonlinearity relu = unary(
        "relu", 1, false, [](double x) { return x > 0 ? x : 0.0; },
        [](double x) { return x > 0 ? 1.0 : 0.0; }, {0.0});
    relu.second_derivative_gaussian_mean = [](double var,
                                             std::span<const double>) {
      return 1.0 / std::sqrt(kTwoPi * var);
    };
    reg.add(relu);
  }
  reg.add(unary("abs", 1, false, [](double x) { return std::fabs(x); },
                [](double x) { return sgn(x); }, {0.0}));
  reg.add(unary("sign", 0, true, sgn, nullptr, {0.0}));
  reg.add(unary("step", 0, false, [](double x) { return x > 0 ? 1.0 : 0.0; },
                nullptr, {0.0}));
  reg.add(unary("tanh", 1, true, [](double x) { return std::tanh(x); },
                [](double x) {
                  double t = std::tanh(x);
                  return 1.0 - t * t;
                }));
  reg.add(unary("erf", 1, true, [](double x) { return std::erf(x); },
                [](double x) { return kTwoOverSqrtPi * std::exp(-x * x); }));
  reg.add(unary("quadratic", 2, false, [](double x) { return 0.5 * x * x; },
                [](double x) { return x; }));
  {
    Nonlinearity st;
    st.name = "soft_threshold";
    st.arity = 1;
    st.poly_degree = 1;
    st.odd = true;
    st.forward = [](std::span<const double> x, std::span<const double> p) {
      const double lam = p.empty() ? 1.0 : p[0];
      return sgn(x[0]) * std::max(std::fabs(x[0]) - lam, 0.0);
    };
    st.partial = [](int, std::span<const double> x, std::span<const double> p) {
      const double lam = p.empty() ? 1.0 : p[0];
      return std::fabs(x[0]) > lam ? 1.0 : 0.0;
    };
    reg.add(st);
  }

  // Derivatives of activations as standalone functions.
  reg.add(unary("dtanh", 1, false,
                [](double x) {
                  double t = std::tanh(x);
                  return 1.0 - t * t;
                },
                [](double x) {
                  double t = std::tanh(x);
                  return -2.0 * t * (1.0 - t * t);
                }));
  reg.add(unary("derf", 1, false,
                [](double x) { return kTwoOverSqrtPi * std::exp(-x * x); },
                [](double x) {
                  return -2.0 * x * kTwoOverSqrtPi * std::exp(-x * x);
                }));
  {
    Nonlinearity drelu = unary("drelu", 0, false,
                               [](double x) { return x > 0 ? 1.0 : 0.0; },
                               nullptr, {0.0});
    drelu.second_derivative_gaussian_mean = nullptr;
    reg.add(drelu);
  }

  // Backprop composites f(x, y) = phi'(x) * y.
  reg.add(backprop("tanh_bp",
                   [](double x) {
                     double t = std::tanh(x);
                     return 1.0 - t * t;
                   },
                   [](double x) {
                     double t = std::tanh(x);
                     return -2.0 * t * (1.0 - t * t);
                   }));
  reg.add(backprop("erf_bp",
                   [](double x) { return kTwoOverSqrtPi * std::exp(-x * x); },
                   [](double x) {
                     return -2.0 * x * kTwoOverSqrtPi * std::exp(-x * x);
                   }));
  reg.add(backprop("relu_bp", [](double x) { return x > 0 ? 1.0 : 0.0; },
                   nullptr, {0.0}));
  reg.add(backprop("id_bp", [](double) { return 1.0; },
                   [](double) { return 0.0; }));
  reg.add(backprop("quadratic_bp", [](double x) { return x; },
                   [](double) { return 1.0; }));

  {
    Nonlinearity mul;
    mul.name = "mul";
    mul.arity = 2;
    mul.poly_degree = 2;
    mul.forward = [](std::span<const double> x, std::span<const double>) {
      return x[0] * x[1];
    };
    mul.partial = [](int i, std::span<const double> x, std::span<const double>) {
      return x[1 - i];
    };
    reg.add(mul);
  }
  {
    Nonlinearity affine;
    affine.name = "affine";
    affine.arity = -1;
    affine.poly_degree = 1;
    affine.forward = [](std::span<const double> x, std::span<const double> p) {
      double s = 0;
      for (size_t i = 0; i < x.size(); ++i)
        s += (i < p.size() ? p[i] : 1.0) * x[i];
      return s;
    };
    affine.partial = [](int i, std::span<const double>,
                        std::span<const double> p) {
      return static_cast<size_t>(i) < p.size() ? p[static_cast<size_t>(i)] : 1.0;
    };
    reg.add(affine);
  }

  reg.add(batchnorm("batchnorm_id", [](double x) { return x; }));
  reg.add(batchnorm("batchnorm_relu",
                    [](double x) { return x > 0 ? x : 0.0; }));
  reg.add(batchnorm("batchnorm_tanh", [](double x) { return std::tanh(x); }));

  // AMP composites: denoiser f(h, x0) = soft_threshold(x0 - h) and residual
  // observation g(b, w) = b + w.
  {
    Nonlinearity f;
    f.name = "amp_denoise";
    f.arity = 2;
    f.poly_degree = 1;
    f.forward = [](std::span<const double> x, std::span<const double> p) {
      const double lam = p.empty() ? 1.0 : p[0];
      const double u = x[1] - x[0];
      return sgn(u) * std::max(std::fabs(u) - lam, 0.0);
    };
    reg.add(f);
  }
  {
    Nonlinearity g;
    g.name = "amp_linear";
    g.arity = 2;
    g.poly_degree = 1;
    g.forward = [](std::span<const double> x, std::span<const double>) {
      return x[1] - x[0];
    };
    reg.add(g);
  }
  {
    Nonlinearity g;
    g.name = "add2";
    g.arity = 2;
    g.poly_degree = 1;
    g.forward = [](std::span<const double> x, std::span<const double>) {
      return x[0] + x[1];
    };
    g.partial = [](int, std::span<const double>, std::span<const double>) {
      return 1.0;
    };
    reg.add(g);
  }

  return reg;
}

}  // namespace

const Registry& Registry::standard() {
  static const Registry reg = build_standard();
  return reg;
}

const Nonlinearity& Registry::at(const std::string& name) const {
  auto it = table_.find(name);
  if (it == table_.end()) throw UnknownNonlinearity(name);
  return it->second;
}

double apply_fn(const Registry& reg, const NonlinRef& ref,
                std::span<const double> x) {
  const Nonlinearity& fn = reg.at(ref.name);
  if (ref.deriv_arg >= 0) {
    if (!fn.has_partial(ref.deriv_arg))
      throw MissingDerivative(ref.name + " partial " +
                              std::to_string(ref.deriv_arg));
    return fn.partial(ref.deriv_arg, x, ref.params);
  }
  return fn.forward(x, ref.params);
}

}  // namespace tp
