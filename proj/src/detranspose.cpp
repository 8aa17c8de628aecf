#include "tp/detranspose.hpp"

#include <algorithm>
#include <stdexcept>

#include "tp/rng.hpp"

namespace tp {

namespace {

struct MatKey {
  int base = 0;        // MatIn line of the underlying matrix
  bool transposed = false;
  bool operator<(const MatKey& o) const {
    return base != o.base ? base < o.base : transposed < o.transposed;
  }
  bool operator==(const MatKey&) const = default;
};

MatKey resolve(const Skeleton& sk, int a_line) {
  MatKey k{a_line, false};
  while (auto* tr = std::get_if<TransposeLine>(&sk.line(k.base).body)) {
    k.base = tr->source;
    k.transposed = !k.transposed;
  }
  return k;
}

// Effective (rows, cols) class-label hints of an A-var, following transposes.
std::pair<std::string, std::string> eff_hints(const Skeleton& sk, int a_line) {
  if (auto* tr = std::get_if<TransposeLine>(&sk.line(a_line).body)) {
    auto h = eff_hints(sk, tr->source);
    return {h.second, h.first};
  }
  const auto& mi = std::get<MatInLine>(sk.line(a_line).body);
  return {mi.rows_hint, mi.cols_hint};
}

// A G-var in the same dimension class as the given check vector var.
int g_rep(const Skeleton& sk, int line) {
  while (sk.kind(line) == VarKind::H) {
    const LineBody& b = sk.line(line).body;
    if (auto* nl = std::get_if<NonlinLine>(&b))
      line = nl->args.front();
    else
      line = std::get<CompLine>(b).args.front();
  }
  return line;
}

// Replace leaves produced by LinComb lines with their decomposition over
// input and product G-vars, so partial derivatives act on honest Gaussian
// coordinates.
ExprPtr primitivize(const Skeleton& sk, const ExprPtr& e) {
  std::map<int, ExprPtr> repl;
  for (int leaf : expr_leaves(e)) {
    if (!std::holds_alternative<LinCombLine>(sk.line(leaf).body)) continue;
    std::vector<std::pair<double, ExprPtr>> terms;
    for (const auto& [line, c] : linear_decompose(sk, leaf))
      terms.emplace_back(c, make_leaf(line));
    repl[leaf] = make_affine(std::move(terms));
  }
  return repl.empty() ? e : substitute(e, repl);
}

struct Builder {
  const Skeleton& sk;
  const CdcPartition& cdc;
  const SamplingSpec& spec;
  ExpectationMethod method;
  const Registry& reg;
  bool derivative_rule;

  DetransposeResult res;
  std::map<MatKey, int> mat_image;  // canonical matrix -> check line

  bool image_is_g(int orig) const {
    return res.check_sk.kind(res.phi.at(orig)) == VarKind::G;
  }

  void build_structure() {
    res.check_sk.syntax = SyntaxMode::Extended;
    for (int l = 1; l <= sk.size(); ++l) {
      const Line& ln = sk.line(l);
      const LineBody& b = ln.body;
      if (auto* vi = std::get_if<VecInLine>(&b)) {
        int nl = res.check_sk.add(ln.name, VecInLine{vi->cdc_hint});
        res.phi[l] = nl;
        double mu = spec.mean_of(l);
        if (mu != 0.0) res.check_spec.mean[nl] = mu;
      } else if (auto* mi = std::get_if<MatInLine>(&b)) {
        int nl = res.check_sk.add(ln.name, MatInLine{*mi});
        res.phi[l] = nl;
        mat_image[{l, false}] = nl;
        res.check_spec.sigma[nl] = spec.sigma_of(l);
      } else if (auto* tr = std::get_if<TransposeLine>(&b)) {
        MatKey key = resolve(sk, l);
        auto it = mat_image.find(key);
        if (it != mat_image.end()) {
          res.phi[l] = it->second;  // same matrix seen before
          continue;
        }
        auto hints = eff_hints(sk, l);
        int nl = res.check_sk.add(ln.name,
                                  MatInLine{hints.first, hints.second});
        res.phi[l] = nl;
        mat_image[key] = nl;
        res.fresh_source[nl] = l;
        // sigma rescaled by the source's limiting aspect ratio rows/cols.
        const auto src_sides = cdc.matrix_sides.at(tr->source);
        const double a =
            alpha_ratio(cdc, spec, src_sides.first, src_sides.second);
        const double src_sigma =
            res.check_spec.sigma_of(res.phi.at(tr->source));
        res.check_spec.sigma[nl] = std::sqrt(a) * src_sigma;
      } else if (auto* lc = std::get_if<LinCombLine>(&b)) {
        bool all_g = true;
        for (const auto& t : lc->terms) all_g = all_g && image_is_g(t.var);
        if (all_g) {
          LinCombLine out;
          for (const auto& t : lc->terms)
            out.terms.push_back({t.coeff, res.phi.at(t.var)});
          res.phi[l] = res.check_sk.add(ln.name, out);
        } else {
          CompLine out;
          out.fn.name = "affine";
          for (const auto& t : lc->terms) {
            out.fn.params.push_back(t.coeff);
            out.args.push_back(res.phi.at(t.var));
          }
          res.phi[l] = res.check_sk.add(ln.name, out);
        }
      } else if (auto* nlin = std::get_if<NonlinLine>(&b)) {
        bool all_g = true;
        std::vector<int> args;
        for (int a : nlin->args) {
          args.push_back(res.phi.at(a));
          all_g = all_g && image_is_g(a);
        }
        if (all_g)
          res.phi[l] = res.check_sk.add(ln.name, NonlinLine{nlin->fn, args});
        else
          res.phi[l] = res.check_sk.add(ln.name, CompLine{nlin->fn, args});
      } else {
        const auto& mm = std::get<MatMulLine>(b);
        // Opposite-orientation products seen so far, in line order.
        const MatKey key = resolve(sk, mm.matrix);
        const MatKey opp{key.base, !key.transposed};
        CoeffRecord rec;
        for (int p = 1; p < l; ++p) {
          if (auto* pm = std::get_if<MatMulLine>(&sk.line(p).body)) {
            if (!(resolve(sk, pm->matrix) == opp)) continue;
            rec.h_args.push_back(pm->vec);
            rec.g_results.push_back(p);
          }
        }
        const auto sides = cdc.matrix_sides.at(mm.matrix);
        rec.alpha = alpha_ratio(cdc, spec, sides.second, sides.first);

        int g_line = res.check_sk.add(
            ln.name + "_g", MatMulLine{mat_image.at(key), res.phi.at(mm.vec)});
        res.phi_g[l] = g_line;
        bool all_g = true;
        for (int h : rec.h_args) all_g = all_g && image_is_g(h);
        if (all_g) {
          LinCombLine out;
          out.terms.push_back({1.0, g_line});
          for (int h : rec.h_args) out.terms.push_back({0.0, res.phi.at(h)});
          res.phi[l] = res.check_sk.add(ln.name, out);
        } else {
          CompLine out;
          out.fn.name = "affine";
          out.fn.params.push_back(1.0);
          out.args.push_back(g_line);
          for (int h : rec.h_args) {
            out.fn.params.push_back(0.0);
            out.args.push_back(res.phi.at(h));
          }
          res.phi[l] = res.check_sk.add(ln.name, out);
        }
        res.coeffs[l] = std::move(rec);
      }
    }

    // Carry covariances between input vectors.
    for (const auto& [pr, v] : spec.cov) {
      if (res.phi.count(pr.first) && res.phi.count(pr.second))
        res.check_spec.set_cov(res.phi.at(pr.first), res.phi.at(pr.second), v);
    }
    res.check_spec.scale = spec.scale;
    res.check_spec.width = spec.width;
  }

  void carry_constraints(const DimConstraints& lam) {
    for (const auto& [a, b] : lam.pairs) {
      int ia = res.phi_g.count(a) ? res.phi_g.at(a) : res.phi.at(a);
      int ib = res.phi_g.count(b) ? res.phi_g.at(b) : res.phi.at(b);
      res.check_lam.pairs.emplace_back(g_rep(res.check_sk, ia),
                                       g_rep(res.check_sk, ib));
    }
  }

  void set_coeffs(int check_line, const Eigen::VectorXd& a) {
    LineBody& b = res.check_sk.lines[static_cast<size_t>(check_line) - 1].body;
    if (auto* lc = std::get_if<LinCombLine>(&b)) {
      for (Eigen::Index i = 0; i < a.size(); ++i)
        lc->terms[static_cast<size_t>(i) + 1].coeff = a(i);
    } else {
      auto& cp = std::get<CompLine>(b);
      for (Eigen::Index i = 0; i < a.size(); ++i)
        cp.fn.params[static_cast<size_t>(i) + 1] = a(i);
    }
  }

  void compute_values() {
    res.check_cdc = compute_cdc(res.check_sk, res.check_lam);
    LimitEngine eng(res.check_sk, res.check_cdc, res.check_spec, method, reg,
                    false);
    // Correction line -> original product line.
    std::map<int, int> corr_of;
    for (const auto& [orig, cl] : res.phi)
      if (res.phi_g.count(orig)) corr_of[cl] = orig;

    for (int cl = 1; cl <= res.check_sk.size(); ++cl) {
      auto it = corr_of.find(cl);
      if (it != corr_of.end()) {
        CoeffRecord& rec = res.coeffs.at(it->second);
        const int s = static_cast<int>(rec.h_args.size());
        rec.C.resize(s, s);
        rec.v.resize(s);
        rec.a.resize(s);
        if (s > 0) {
          ExpectationMethod m = method;
          m.seed = mix(method.seed, static_cast<std::uint64_t>(cl));
          const auto& mm = std::get<MatMulLine>(
              res.check_sk.line(res.phi_g.at(it->second)).body);
          {
            std::vector<ExprPtr> fns;
            for (int h : rec.h_args)
              fns.push_back(expand_definition(res.check_sk, res.phi.at(h)));
            const int cls =
                res.check_cdc.vec_class(res.phi.at(rec.h_args.front()));
            rec.C = expect(fns, eng.class_spec(cls), m, reg).gram;
          }
          const int cls2 = res.check_cdc.vec_class(res.phi.at(
              corr_arg_of(it->second)));
          if (derivative_rule) {
            ExprPtr f = primitivize(
                res.check_sk,
                expand_definition(res.check_sk,
                                  res.phi.at(corr_arg_of(it->second))));
            const int opp_line = opposite_matrix_line(mm.matrix);
            const double sig = res.check_spec.sigma_of(opp_line);
            GaussianSpec gs = eng.class_spec(cls2);
            for (int i = 0; i < s; ++i) {
              rec.v(i) = stein_derivative(
                  f, gs, res.phi_g.at(rec.g_results[static_cast<size_t>(i)]),
                  m, reg);
              rec.a(i) = rec.alpha * sig * sig * rec.v(i);
            }
          } else {
            std::vector<ExprPtr> fns;
            for (int g : rec.g_results)
              fns.push_back(make_leaf(res.phi_g.at(g)));
            fns.push_back(expand_definition(
                res.check_sk, res.phi.at(corr_arg_of(it->second))));
            ExpectResult er = expect(fns, eng.class_spec(cls2), m, reg);
            for (int i = 0; i < s; ++i) rec.v(i) = er.gram(i, s);
            rec.a = rec.alpha * pinv(rec.C) * rec.v;
          }
        }
        set_coeffs(cl, rec.a);
      }
      eng.process_line(cl);
    }
    res.table = eng.table();
    res.diag = eng.take_diagnostics();
  }

  // Original argument var of the product being corrected.
  int corr_arg_of(int orig_line) const {
    return std::get<MatMulLine>(sk.line(orig_line).body).vec;
  }

  // Check matrix standing in for the opposite orientation of a check matrix.
  int opposite_matrix_line(int check_mat_line) const {
    for (const auto& [key, cl] : mat_image) {
      if (cl == check_mat_line) {
        auto it = mat_image.find(MatKey{key.base, !key.transposed});
        if (it == mat_image.end())
          throw std::logic_error("opposite matrix has no check image");
        return it->second;
      }
    }
    throw std::logic_error("unknown check matrix line");
  }
};

DetransposeResult run(const Skeleton& sk, const CdcPartition& cdc,
                      const SamplingSpec& spec, const DimConstraints& lam,
                      ExpectationMethod method, const Registry& reg,
                      bool derivative_rule) {
  if (sk.syntax != SyntaxMode::Original)
    throw std::invalid_argument(
        "detransposition is defined on original-syntax programs");
  Builder b{sk, cdc, spec, method, reg, derivative_rule, {}, {}};
  b.build_structure();
  b.carry_constraints(lam);
  b.compute_values();
  return std::move(b.res);
}

}  // namespace

DetransposeResult detranspose(const Skeleton& sk, const CdcPartition& cdc,
                              const SamplingSpec& spec,
                              ExpectationMethod method, const Registry& reg,
                              const DimConstraints& lam) {
  return run(sk, cdc, spec, lam, method, reg, false);
}

DetransposeResult detranspose_derivative(const Skeleton& sk,
                                         const CdcPartition& cdc,
                                         const SamplingSpec& spec,
                                         ExpectationMethod method,
                                         const Registry& reg,
                                         const DimConstraints& lam) {
  return run(sk, cdc, spec, lam, method, reg, true);
}

double general_limit_moment(const DetransposeResult& res, const ExprPtr& phi,
                            ExpectationMethod method, const Registry& reg) {
  std::map<int, ExprPtr> repl;
  int check_cls = -1;
  for (int leaf : expr_leaves(phi)) {
    int img = res.phi.at(leaf);
    repl[leaf] = expand_definition(res.check_sk, img);
    check_cls = res.check_cdc.vec_class(img);
  }
  if (check_cls < 0) throw std::invalid_argument("phi has no leaves");
  return limit_moment(res.table, res.check_cdc, check_cls,
                      substitute(phi, repl), method, reg);
}

double general_limit_moment(const Skeleton& sk, const CdcPartition& cdc,
                            const SamplingSpec& spec, int cls,
                            const ExprPtr& phi, ExpectationMethod method,
                            const Registry& reg) {
  for (int leaf : expr_leaves(phi))
    if (cdc.vec_class(leaf) != cls)
      throw std::invalid_argument("leaf line " + std::to_string(leaf) +
                                  " is outside the requested class");
  DetransposeResult res = detranspose(sk, cdc, spec, method, reg);
  return general_limit_moment(res, phi, method, reg);
}

}  // namespace tp
