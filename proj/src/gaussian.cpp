#include "tp/gaussian.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tp/rng.hpp"

#ifdef TP_HAVE_OPENMP
#include <omp.h>
#endif

namespace tp {

int GaussianSpec::index_of(int label) const {
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == label) return static_cast<int>(i);
  return -1;
}

void gauss_hermite(int n, std::vector<double>& nodes,
                   std::vector<double>& weights) {
  // Golub-Welsch for the probabilists' Hermite recurrence (b_k = sqrt(k)).
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    double b = std::sqrt(static_cast<double>(i));
    J(i, i - 1) = b;
    J(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  nodes.resize(static_cast<size_t>(n));
  weights.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    nodes[static_cast<size_t>(i)] = es.eigenvalues()(i);
    double v = es.eigenvectors()(0, i);
    weights[static_cast<size_t>(i)] = v * v;
  }
}

Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& cov) {
  if (cov.rows() == 0) return Eigen::MatrixXd(0, 0);
  const double maxdiag = cov.diagonal().maxCoeff();
  const double tol = kPsdTolFactor * std::max(maxdiag, 0.0) + 1e-14;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.eigenvalues().minCoeff() < -tol)
    throw std::invalid_argument("covariance is not PSD within tolerance");
  std::vector<int> keep;
  for (int i = 0; i < cov.rows(); ++i)
    if (es.eigenvalues()(i) > tol) keep.push_back(i);
  Eigen::MatrixXd L(cov.rows(), static_cast<Eigen::Index>(keep.size()));
  for (size_t j = 0; j < keep.size(); ++j)
    L.col(static_cast<Eigen::Index>(j)) =
        es.eigenvectors().col(keep[j]) * std::sqrt(es.eigenvalues()(keep[j]));
  return L;
}

namespace {

struct Integrand {
  CompiledExpr expr;
  std::vector<int> slots;  // positions of expr leaves in the sub-spec
};

// Shared evaluation core: mean/gram of fns over points z = mu + L xi.
class SubProblem {
 public:
  SubProblem(const std::vector<ExprPtr>& fns, const GaussianSpec& gs,
             const Registry& reg) {
    std::vector<int> sub_labels;
    auto slot_of = [&](int label) {
      for (size_t i = 0; i < sub_labels.size(); ++i)
        if (sub_labels[i] == label) return static_cast<int>(i);
      sub_labels.push_back(label);
      return static_cast<int>(sub_labels.size()) - 1;
    };
    for (const auto& f : fns) {
      Integrand ig;
      ig.expr = CompiledExpr(f, reg);
      for (int leaf : ig.expr.leaf_lines()) ig.slots.push_back(slot_of(leaf));
      integrands_.push_back(std::move(ig));
    }
    const int d = static_cast<int>(sub_labels.size());
    mu_.resize(d);
    Eigen::MatrixXd K(d, d);
    for (int i = 0; i < d; ++i) {
      int gi = gs.index_of(sub_labels[static_cast<size_t>(i)]);
      if (gi < 0)
        throw std::invalid_argument("dag leaf not labeled in GaussianSpec");
      mu_(i) = gs.mean(gi);
      for (int j = 0; j < d; ++j) {
        int gj = gs.index_of(sub_labels[static_cast<size_t>(j)]);
        K(i, j) = gs.cov(gi, gj);
      }
    }
    L_ = psd_factor(K);
  }

  int rank() const { return static_cast<int>(L_.cols()); }
  int dim() const { return static_cast<int>(mu_.size()); }
  size_t count() const { return integrands_.size(); }

  // Evaluate all integrands at mu + L xi into out.
  void eval_point(const Eigen::VectorXd& xi, std::vector<double>& z,
                  std::vector<double>& buf, std::vector<double>& out) const {
    z.resize(static_cast<size_t>(dim()));
    Eigen::Map<Eigen::VectorXd> zv(z.data(), dim());
    zv = mu_;
    if (rank() > 0) zv += L_ * xi;
    out.resize(integrands_.size());
    for (size_t f = 0; f < integrands_.size(); ++f) {
      const Integrand& ig = integrands_[f];
      buf.resize(ig.slots.size());
      for (size_t i = 0; i < ig.slots.size(); ++i)
        buf[i] = z[static_cast<size_t>(ig.slots[i])];
      out[f] = ig.expr.eval(buf);
    }
  }

 private:
  std::vector<Integrand> integrands_;
  Eigen::VectorXd mu_;
  Eigen::MatrixXd L_;
};

ExpectResult quad_expect(const SubProblem& sp, int points) {
  std::vector<double> nodes, weights;
  gauss_hermite(points, nodes, weights);
  const int r = sp.rank();
  const size_t k = sp.count();
  ExpectResult res;
  res.gram = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k),
                                   static_cast<Eigen::Index>(k));
  res.mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));

  std::vector<int> idx(static_cast<size_t>(r), 0);
  Eigen::VectorXd xi(r);
  std::vector<double> z, buf, vals;
  while (true) {
    double w = 1.0;
    for (int d = 0; d < r; ++d) {
      xi(d) = nodes[static_cast<size_t>(idx[static_cast<size_t>(d)])];
      w *= weights[static_cast<size_t>(idx[static_cast<size_t>(d)])];
    }
    sp.eval_point(xi, z, buf, vals);
    for (size_t i = 0; i < k; ++i) {
      res.mean(static_cast<Eigen::Index>(i)) += w * vals[i];
      for (size_t j = i; j < k; ++j)
        res.gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) +=
            w * vals[i] * vals[j];
    }
    // advance the tensor-grid counter
    int d = 0;
    for (; d < r; ++d) {
      if (++idx[static_cast<size_t>(d)] < points) break;
      idx[static_cast<size_t>(d)] = 0;
    }
    if (d == r) break;
    if (r == 0) break;
  }
  if (sp.rank() == 0) {
    // single deterministic point already accumulated once with weight 1
  }
  res.gram = res.gram.selfadjointView<Eigen::Upper>();
  return res;
}

ExpectResult mc_expect(const SubProblem& sp, long long samples,
                       std::uint64_t seed, bool parallel) {
  constexpr long long kChunk = 4096;
  const long long chunks = (samples + kChunk - 1) / kChunk;
  const int r = sp.rank();
  const size_t k = sp.count();
  const Eigen::Index ke = static_cast<Eigen::Index>(k);

  std::vector<Eigen::MatrixXd> gram_part(static_cast<size_t>(chunks));
  std::vector<Eigen::VectorXd> mean_part(static_cast<size_t>(chunks));

  // Chunks use independent counter-derived streams and are combined in a
  // fixed order, so the result is identical for any thread count.
#ifdef TP_HAVE_OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
  for (long long c = 0; c < chunks; ++c) {
    NormalStream rng(mix(seed, 0x6d0c5a7e2f1b3d49ULL + static_cast<std::uint64_t>(c)));
    const long long n0 = c * kChunk;
    const long long n1 = std::min(samples, n0 + kChunk);
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(ke, ke);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(ke);
    Eigen::VectorXd xi(r);
    std::vector<double> z, buf, vals;
    for (long long s = n0; s < n1; ++s) {
      for (int d = 0; d < r; ++d) xi(d) = rng.next();
      sp.eval_point(xi, z, buf, vals);
      for (size_t i = 0; i < k; ++i) {
        mean(static_cast<Eigen::Index>(i)) += vals[i];
        for (size_t j = i; j < k; ++j)
          gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) +=
              vals[i] * vals[j];
      }
    }
    gram_part[static_cast<size_t>(c)] = gram;
    mean_part[static_cast<size_t>(c)] = mean;
  }

  ExpectResult res;
  res.gram = Eigen::MatrixXd::Zero(ke, ke);
  res.mean = Eigen::VectorXd::Zero(ke);
  for (long long c = 0; c < chunks; ++c) {
    res.gram += gram_part[static_cast<size_t>(c)];
    res.mean += mean_part[static_cast<size_t>(c)];
  }
  res.gram /= static_cast<double>(samples);
  res.mean /= static_cast<double>(samples);
  res.gram = res.gram.selfadjointView<Eigen::Upper>();
  return res;
}

}  // namespace

ExpectResult expect(const std::vector<ExprPtr>& fns, const GaussianSpec& gs,
                    const ExpectationMethod& method, const Registry& reg) {
  SubProblem sp(fns, gs, reg);
  switch (method.kind) {
    case ExpectationMethod::Kind::Quadrature:
      if (sp.rank() > kQuadDimMax)
        throw std::invalid_argument(
            "quadrature requested beyond effective dimension " +
            std::to_string(kQuadDimMax));
      return quad_expect(sp, method.points);
    case ExpectationMethod::Kind::MonteCarlo:
      return mc_expect(sp, method.samples, method.seed, method.parallel);
    case ExpectationMethod::Kind::Auto:
      if (sp.rank() <= kQuadDimMax) return quad_expect(sp, method.points);
      return mc_expect(sp, method.samples, method.seed, method.parallel);
  }
  throw std::logic_error("unreachable");
}

double expect_scalar(const ExprPtr& fn, const GaussianSpec& gs,
                     const ExpectationMethod& method, const Registry& reg) {
  return expect({fn}, gs, method, reg).mean(0);
}

namespace {

// 1- or 2-point expectation of scalar functions under a small Gaussian.
double small_expect(const std::function<double(const Eigen::VectorXd&)>& f,
                    const Eigen::MatrixXd& sigma, int points) {
  Eigen::MatrixXd L = psd_factor(sigma);
  const int r = static_cast<int>(L.cols());
  std::vector<double> nodes, weights;
  gauss_hermite(points, nodes, weights);
  Eigen::VectorXd z(sigma.rows());
  if (r == 0) {
    z.setZero();
    return f(z);
  }
  double acc = 0;
  std::vector<int> idx(static_cast<size_t>(r), 0);
  Eigen::VectorXd xi(r);
  while (true) {
    double w = 1.0;
    for (int d = 0; d < r; ++d) {
      xi(d) = nodes[static_cast<size_t>(idx[static_cast<size_t>(d)])];
      w *= weights[static_cast<size_t>(idx[static_cast<size_t>(d)])];
    }
    z = L * xi;
    acc += w * f(z);
    int d = 0;
    for (; d < r; ++d) {
      if (++idx[static_cast<size_t>(d)] < points) break;
      idx[static_cast<size_t>(d)] = 0;
    }
    if (d == r) break;
  }
  return acc;
}

}  // namespace

Eigen::MatrixXd v_op_mixed(const std::function<double(double)>& phi,
                           const std::function<double(double)>& psi,
                           const Eigen::MatrixXd& sigma,
                           const ExpectationMethod& method) {
  const Eigen::Index n = sigma.rows();
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      Eigen::MatrixXd s(2, 2);
      s << sigma(i, i), sigma(i, j), sigma(j, i), sigma(j, j);
      out(i, j) = small_expect(
          [&](const Eigen::VectorXd& z) { return phi(z(0)) * psi(z(1)); }, s,
          method.points);
    }
  }
  return out;
}

Eigen::MatrixXd v_op(const std::function<double(double)>& phi,
                     const Eigen::MatrixXd& sigma,
                     const ExpectationMethod& method) {
  const Eigen::Index n = sigma.rows();
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      Eigen::MatrixXd s(2, 2);
      s << sigma(i, i), sigma(i, j), sigma(j, i), sigma(j, j);
      out(i, j) = out(j, i) = small_expect(
          [&](const Eigen::VectorXd& z) { return phi(z(0)) * phi(z(1)); }, s,
          method.points);
    }
  }
  return out;
}

Eigen::MatrixXd v_op_vector(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& phi,
    const Eigen::MatrixXd& sigma, const ExpectationMethod& method) {
  const Eigen::Index b = sigma.rows();
  Eigen::MatrixXd L = psd_factor(sigma);
  const int r = static_cast<int>(L.cols());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(b, b);
  if (r <= kQuadDimMax) {
    std::vector<double> nodes, weights;
    gauss_hermite(method.points, nodes, weights);
    std::vector<int> idx(static_cast<size_t>(r), 0);
    Eigen::VectorXd xi(r);
    if (r == 0) {
      Eigen::VectorXd v = phi(Eigen::VectorXd::Zero(b));
      return v * v.transpose();
    }
    while (true) {
      double w = 1.0;
      for (int d = 0; d < r; ++d) {
        xi(d) = nodes[static_cast<size_t>(idx[static_cast<size_t>(d)])];
        w *= weights[static_cast<size_t>(idx[static_cast<size_t>(d)])];
      }
      Eigen::VectorXd v = phi(L * xi);
      out += w * (v * v.transpose());
      int d = 0;
      for (; d < r; ++d) {
        if (++idx[static_cast<size_t>(d)] < method.points) break;
        idx[static_cast<size_t>(d)] = 0;
      }
      if (d == r) break;
    }
    return out;
  }
  // Monte Carlo for batch sizes beyond the quadrature budget.
  NormalStream rng(mix(method.seed, 0xb00cbeefULL));
  Eigen::VectorXd xi(r);
  for (long long s = 0; s < method.samples; ++s) {
    for (int d = 0; d < r; ++d) xi(d) = rng.next();
    Eigen::VectorXd v = phi(L * xi);
    out += v * v.transpose();
  }
  return out / static_cast<double>(method.samples);
}

Eigen::MatrixXd pinv(const Eigen::MatrixXd& m, double rel_cutoff) {
  if (m.rows() == 0 || m.cols() == 0)
    return Eigen::MatrixXd::Zero(m.cols(), m.rows());
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(
      m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double cutoff = rel_cutoff * sv(0);
  Eigen::VectorXd inv = sv;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    inv(i) = sv(i) > cutoff ? 1.0 / sv(i) : 0.0;
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

GaussianSpec condition_gaussian(const GaussianSpec& gs,
                                const std::vector<int>& observed,
                                const Eigen::VectorXd& values) {
  std::vector<int> rest;
  for (int i = 0; i < gs.dim(); ++i)
    if (std::find(observed.begin(), observed.end(), i) == observed.end())
      rest.push_back(i);
  const Eigen::Index n1 = static_cast<Eigen::Index>(rest.size());
  const Eigen::Index n2 = static_cast<Eigen::Index>(observed.size());
  if (n2 == 0) return gs;

  Eigen::VectorXd mu1(n1), mu2(n2);
  Eigen::MatrixXd k11(n1, n1), k12(n1, n2), k22(n2, n2);
  for (Eigen::Index i = 0; i < n1; ++i) {
    mu1(i) = gs.mean(rest[static_cast<size_t>(i)]);
    for (Eigen::Index j = 0; j < n1; ++j)
      k11(i, j) = gs.cov(rest[static_cast<size_t>(i)], rest[static_cast<size_t>(j)]);
    for (Eigen::Index j = 0; j < n2; ++j)
      k12(i, j) = gs.cov(rest[static_cast<size_t>(i)], observed[static_cast<size_t>(j)]);
  }
  for (Eigen::Index i = 0; i < n2; ++i) {
    mu2(i) = gs.mean(observed[static_cast<size_t>(i)]);
    for (Eigen::Index j = 0; j < n2; ++j)
      k22(i, j) = gs.cov(observed[static_cast<size_t>(i)], observed[static_cast<size_t>(j)]);
  }
  const Eigen::MatrixXd k22p = pinv(k22);
  GaussianSpec out;
  out.mean = mu1 + k12 * k22p * (values - mu2);
  out.cov = k11 - k12 * k22p * k12.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  for (int i : rest) out.labels.push_back(gs.labels[static_cast<size_t>(i)]);
  return out;
}

MatrixConditioning conditional_matrix_law(int n, int m, double sigma,
                                          const Eigen::MatrixXd& Q,
                                          const Eigen::MatrixXd& Y,
                                          const Eigen::MatrixXd& P,
                                          const Eigen::MatrixXd& X,
                                          double tol) {
  (void)sigma;
  MatrixConditioning out;
  const Eigen::MatrixXd Qp = pinv(Q);
  const Eigen::MatrixXd Pp = pinv(P);
  const Eigen::MatrixXd PpT = Pp.transpose();
  if (Q.size() == 0 && P.size() == 0) {
    out.E = Eigen::MatrixXd::Zero(n, m);
    out.proj_left = Eigen::MatrixXd::Identity(n, n);
    out.proj_right = Eigen::MatrixXd::Identity(m, m);
    return out;
  }
  Eigen::MatrixXd E = Eigen::MatrixXd::Zero(n, m);
  if (Q.size() > 0) E += Y * Qp;
  if (P.size() > 0) E += PpT * X.transpose();
  if (Q.size() > 0 && P.size() > 0) E -= PpT * P.transpose() * Y * Qp;
  out.E = E;
  out.proj_left = Eigen::MatrixXd::Identity(n, n);
  if (P.size() > 0) out.proj_left -= P * Pp;
  out.proj_right = Eigen::MatrixXd::Identity(m, m);
  if (Q.size() > 0) out.proj_right -= Q * Qp;

  double scale = 1.0 + (Y.size() ? Y.cwiseAbs().maxCoeff() : 0.0) +
                 (X.size() ? X.cwiseAbs().maxCoeff() : 0.0);
  if (Q.size() > 0 && (E * Q - Y).cwiseAbs().maxCoeff() > tol * scale)
    throw std::invalid_argument("inconsistent constraints: E Q != Y");
  if (P.size() > 0 &&
      (P.transpose() * E - X.transpose()).cwiseAbs().maxCoeff() > tol * scale)
    throw std::invalid_argument("inconsistent constraints: P^T E != X^T");
  return out;
}

Eigen::VectorXd expected_gradient(const ExprPtr& fn, const GaussianSpec& gs,
                                  const ExpectationMethod& method,
                                  const Registry& reg) {
  const std::vector<int> lv = expr_leaves(fn);
  const Eigen::Index d = static_cast<Eigen::Index>(lv.size());

  // Direct route: expectation of the symbolic derivative.
  try {
    Eigen::VectorXd out(d);
    std::vector<ExprPtr> dfns;
    for (int leaf : lv) dfns.push_back(derivative(fn, leaf, reg));
    ExpectResult r = expect(dfns, gs, method, reg);
    for (Eigen::Index i = 0; i < d; ++i) out(i) = r.mean(i);
    return out;
  } catch (const MissingDerivative&) {
    // fall through to Stein inversion
  }

  // Stein route: E[Z f(Z)] = K E[grad f] for centered Z; solve with the
  // pseudoinverse (maximal-rank reduction in the singular basis).
  std::vector<ExprPtr> fns{fn};
  for (int leaf : lv) fns.push_back(make_leaf(leaf));
  ExpectResult r = expect(fns, gs, method, reg);
  Eigen::VectorXd zf(d);
  Eigen::MatrixXd K(d, d);
  Eigen::VectorXd mu(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    int gi = gs.index_of(lv[static_cast<size_t>(i)]);
    mu(i) = gs.mean(gi);
    // centered cross moment E[(Z_i - mu_i) f]
    zf(i) = r.gram(0, i + 1) - mu(i) * r.mean(0);
    for (Eigen::Index j = 0; j < d; ++j)
      K(i, j) = gs.cov(gi, gs.index_of(lv[static_cast<size_t>(j)]));
  }
  Eigen::VectorXd grad = pinv(K) * zf;
  const double resid = (K * grad - zf).cwiseAbs().maxCoeff();
  const double scale = 1.0 + zf.cwiseAbs().maxCoeff();
  if (resid > 1e-6 * scale)
    throw std::runtime_error(
        "stein derivative: covariance singular along required direction");
  return grad;
}

double stein_derivative(const ExprPtr& fn, const GaussianSpec& gs,
                        int wrt_label, const ExpectationMethod& method,
                        const Registry& reg) {
  const std::vector<int> lv = expr_leaves(fn);
  Eigen::VectorXd grad = expected_gradient(fn, gs, method, reg);
  for (size_t i = 0; i < lv.size(); ++i)
    if (lv[i] == wrt_label) return grad(static_cast<Eigen::Index>(i));
  return 0.0;  // fn does not depend on the coordinate
}

}  // namespace tp
