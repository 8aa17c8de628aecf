#include "tp/limits.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tp/rng.hpp"

namespace tp {

namespace {

std::pair<int, int> sorted(int a, int b) {
  return a <= b ? std::make_pair(a, b) : std::make_pair(b, a);
}

int gram_rank(const Eigen::MatrixXd& g, double cutoff_factor) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(g);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0) return 0;
  const double cutoff = cutoff_factor * sv(0);
  int r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > cutoff) ++r;
  return r;
}

}  // namespace

double LimitTable::mu_of(int g) const {
  auto it = mu.find(g);
  if (it == mu.end())
    throw std::out_of_range("mu entry missing for line " + std::to_string(g));
  return it->second;
}

double LimitTable::k_of(int a, int b) const {
  auto it = k.find(sorted(a, b));
  if (it == k.end())
    throw std::out_of_range("K entry missing for lines " + std::to_string(a) +
                            "," + std::to_string(b));
  return it->second;
}

LimitEngine::LimitEngine(const Skeleton& sk, const CdcPartition& cdc,
                         const SamplingSpec& spec, ExpectationMethod method,
                         const Registry& reg, bool transposed_alpha)
    : sk_(sk),
      cdc_(cdc),
      spec_(spec),
      method_(method),
      reg_(reg),
      transposed_alpha_(transposed_alpha) {
  processed_.resize(static_cast<size_t>(cdc.num_classes()));
}

LimitEngine::MatrixId LimitEngine::resolve_matrix(int a_line) const {
  MatrixId id{a_line, false};
  while (auto* tr = std::get_if<TransposeLine>(&sk_.line(id.base).body)) {
    id.base = tr->source;
    id.transposed = !id.transposed;
  }
  return id;
}

double LimitEngine::matrix_factor(int a_line) const {
  if (!transposed_alpha_) return 1.0;
  if (!resolve_matrix(a_line).transposed) return 1.0;
  const auto sides = cdc_.matrix_sides.at(a_line);
  // The width ratio of the original matrix's rows class over its cols class:
  // for a transposed line those are the cols and rows classes respectively.
  return alpha_ratio(cdc_, spec_, sides.second, sides.first);
}

GaussianSpec LimitEngine::class_spec(int cls) const {
  const auto& lines = processed_.at(static_cast<size_t>(cls));
  GaussianSpec gs;
  gs.labels = lines;
  const Eigen::Index d = static_cast<Eigen::Index>(lines.size());
  gs.mean.resize(d);
  gs.cov.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    gs.mean(i) = table_.mu_of(lines[static_cast<size_t>(i)]);
    for (Eigen::Index j = 0; j <= i; ++j) {
      double v = table_.k_of(lines[static_cast<size_t>(i)],
                             lines[static_cast<size_t>(j)]);
      gs.cov(i, j) = gs.cov(j, i) = v;
    }
  }
  return gs;
}

double LimitEngine::pair_k(int l, int m, const std::map<int, double>& gram_row,
                           double branch4_scale) const {
  const LineBody& bl = sk_.line(l).body;
  const LineBody& bm = sk_.line(m).body;
  // Branch 1: two input vectors.
  if (std::holds_alternative<VecInLine>(bl) &&
      std::holds_alternative<VecInLine>(bm))
    return spec_.cov_of(l, m);
  // Branch 2: the new line is a linear combination.
  if (auto* lcm = std::get_if<LinCombLine>(&bm)) {
    double s = 0;
    for (const auto& t : lcm->terms) s += t.coeff * table_.k_of(t.var, l);
    return s;
  }
  // Branch 3: the prior line is a linear combination.
  if (auto* lcl = std::get_if<LinCombLine>(&bl)) {
    double s = 0;
    for (const auto& t : lcl->terms)
      s += t.coeff * pair_k(t.var, m, gram_row, branch4_scale);
    return s;
  }
  // Branch 4: two products by the same matrix.
  if (auto* mml = std::get_if<MatMulLine>(&bl)) {
    if (auto* mmm = std::get_if<MatMulLine>(&bm)) {
      if (resolve_matrix(mml->matrix) == resolve_matrix(mmm->matrix))
        return branch4_scale * gram_row.at(l);
    }
  }
  // Branch 5: everything else is asymptotically uncorrelated.
  return 0.0;
}

void LimitEngine::process_line(int l) {
  if (l != next_line_)
    throw std::logic_error("lines must be processed in order");
  ++next_line_;
  if (sk_.kind(l) != VarKind::G) return;

  const int cls = cdc_.g_class(l);
  const LineBody& body = sk_.line(l).body;

  // mu entry.
  double mu = 0;
  if (std::holds_alternative<VecInLine>(body)) {
    mu = spec_.mean_of(l);
  } else if (auto* lc = std::get_if<LinCombLine>(&body)) {
    for (const auto& t : lc->terms) mu += t.coeff * table_.mu_of(t.var);
  }
  table_.mu[l] = mu;

  // Branch-4 preparation: joint second moments of the expanded argument
  // definitions across all products by the same matrix, in one expectation
  // (shared noise keeps the Gram matrix PSD under Monte Carlo).
  std::map<int, double> gram_row;
  double gram_diag = 0;
  double branch4_scale = 0;
  if (auto* mm = std::get_if<MatMulLine>(&body)) {
    const MatrixId mid = resolve_matrix(mm->matrix);
    const double sig = spec_.sigma_of(mid.base);
    branch4_scale = matrix_factor(mm->matrix) * sig * sig;
    auto& priors = matmuls_[mid];
    std::vector<ExprPtr> fns;
    for (int p : priors)
      fns.push_back(
          expand_definition(sk_, std::get<MatMulLine>(sk_.line(p).body).vec));
    fns.push_back(expand_definition(sk_, mm->vec));
    const int arg_cls = cdc_.matrix_sides.at(mm->matrix).second;
    ExpectationMethod m = method_;
    m.seed = mix(method_.seed, static_cast<std::uint64_t>(l));
    ExpectResult er = expect(fns, class_spec(arg_cls), m, reg_);
    const Eigen::Index last = er.gram.rows() - 1;
    for (size_t i = 0; i < priors.size(); ++i)
      gram_row[priors[i]] = er.gram(static_cast<Eigen::Index>(i), last);
    gram_diag = er.gram(last, last);

    RankDiagnostics::Entry entry;
    entry.matrix_line = mid.base;
    entry.transposed = mid.transposed;
    entry.gram = er.gram;
    entry.rank = gram_rank(er.gram, kPinvCutoff);
    entry.stable = entry.rank == gram_rank(er.gram, kPinvCutoff * (1 + 1e-6)) &&
                   entry.rank == gram_rank(er.gram, kPinvCutoff * (1 - 1e-6));
    if (!entry.stable)
      diag_.warnings.push_back("rank of Gram matrix for matrix line " +
                               std::to_string(mid.base) +
                               " is sensitive to the cutoff at line " +
                               std::to_string(l));
    auto lr = last_rank_.find(mid);
    if (lr != last_rank_.end() && entry.rank < lr->second)
      diag_.warnings.push_back("Gram rank decreased at line " +
                               std::to_string(l));
    last_rank_[mid] = entry.rank;
    diag_.entries.push_back(std::move(entry));
    priors.push_back(l);
  }

  // K entries against priors of the same class, in line order, then the
  // diagonal.
  for (int p : processed_[static_cast<size_t>(cls)])
    table_.k[sorted(p, l)] = pair_k(p, l, gram_row, branch4_scale);

  double diag = 0;
  if (std::holds_alternative<VecInLine>(body)) {
    diag = spec_.cov_of(l, l);
  } else if (auto* lc = std::get_if<LinCombLine>(&body)) {
    for (const auto& s : lc->terms)
      for (const auto& t : lc->terms)
        diag += s.coeff * t.coeff * table_.k_of(s.var, t.var);
  } else {
    diag = branch4_scale * gram_diag;
  }
  table_.k[sorted(l, l)] = diag;

  processed_[static_cast<size_t>(cls)].push_back(l);
}

void LimitEngine::process_all() {
  while (next_line_ <= sk_.size()) process_line(next_line_);
}

std::pair<LimitTable, RankDiagnostics> compute_limits_no_transpose(
    const Skeleton& sk, const CdcPartition& cdc, const SamplingSpec& spec,
    ExpectationMethod method, const Registry& reg) {
  for (int l = 1; l <= sk.size(); ++l)
    if (std::holds_alternative<TransposeLine>(sk.line(l).body))
      throw std::invalid_argument("transpose line " + std::to_string(l) +
                                  " not supported by this recursion");
  LimitEngine eng(sk, cdc, spec, method, reg, false);
  eng.process_all();
  return {eng.table(), eng.take_diagnostics()};
}

namespace {

// Scalar surrogate of a program extension: vector vars become scalars, each
// matrix becomes an independent scalar multiplier.  Oddness of the new vars
// in the new inputs survives this collapse, since every operation acts the
// same way coordinatewise.
struct Surrogate {
  const Skeleton& ext;
  const Registry& reg;
  int fwd_size;
  std::vector<double> old_vals;  // value per fwd vector line
  std::vector<double> mat_vals;  // value per A line (base only used)

  double eval_line(int l, const std::vector<double>& vals,
                   const std::vector<double>& vins) const {
    const LineBody& b = ext.line(l).body;
    if (auto* mm = std::get_if<MatMulLine>(&b)) {
      int base = mm->matrix;
      while (auto* tr = std::get_if<TransposeLine>(&ext.line(base).body))
        base = tr->source;
      return mat_vals[static_cast<size_t>(base)] *
             vals[static_cast<size_t>(mm->vec)];
    }
    if (auto* lc = std::get_if<LinCombLine>(&b)) {
      double s = 0;
      for (const auto& t : lc->terms)
        s += t.coeff * vals[static_cast<size_t>(t.var)];
      return s;
    }
    const NonlinRef* fn = nullptr;
    const std::vector<int>* args = nullptr;
    if (auto* nl = std::get_if<NonlinLine>(&b)) {
      fn = &nl->fn;
      args = &nl->args;
    } else if (auto* cp = std::get_if<CompLine>(&b)) {
      fn = &cp->fn;
      args = &cp->args;
    }
    if (fn) {
      std::vector<double> x;
      for (int a : *args) x.push_back(vals[static_cast<size_t>(a)]);
      return apply_fn(reg, *fn, x);
    }
    // VecIn: new input value from vins.
    return vins[static_cast<size_t>(l)];
  }

  // Evaluate all new vector lines; sign = +-1 applied to new inputs.
  std::vector<double> run(const std::vector<double>& vins, double sign) const {
    std::vector<double> vals(static_cast<size_t>(ext.size()) + 1, 0.0);
    for (int l = 1; l <= fwd_size; ++l)
      if (ext.is_vec(l)) vals[static_cast<size_t>(l)] = old_vals[static_cast<size_t>(l)];
    std::vector<double> out;
    for (int l = fwd_size + 1; l <= ext.size(); ++l) {
      if (!ext.is_vec(l)) continue;
      if (std::holds_alternative<VecInLine>(ext.line(l).body))
        vals[static_cast<size_t>(l)] = sign * vins[static_cast<size_t>(l)];
      else
        vals[static_cast<size_t>(l)] = eval_line(l, vals, vins);
      out.push_back(vals[static_cast<size_t>(l)]);
    }
    return out;
  }
};

}  // namespace

std::vector<Diagnostic> check_extension(const Skeleton& fwd,
                                        const Skeleton& ext,
                                        const SamplingSpec& spec,
                                        const Registry& reg,
                                        std::uint64_t seed) {
  std::vector<Diagnostic> out;
  if (ext.size() < fwd.size()) {
    out.push_back({0, "extension is shorter than the base program"});
    return out;
  }
  for (int l = 1; l <= fwd.size(); ++l) {
    if (!(ext.line(l) == fwd.line(l))) {
      out.push_back({l, "extension modifies a base-program line"});
      return out;
    }
  }

  auto is_new = [&](int l) { return l > fwd.size(); };
  for (int l = fwd.size() + 1; l <= ext.size(); ++l) {
    const LineBody& b = ext.line(l).body;
    if (std::holds_alternative<MatInLine>(b)) {
      out.push_back({l, "extension may not introduce new input matrices"});
    } else if (auto* tr = std::get_if<TransposeLine>(&b)) {
      int base = tr->source;
      while (auto* t2 = std::get_if<TransposeLine>(&ext.line(base).body))
        base = t2->source;
      if (is_new(base))
        out.push_back({l, "transpose of a matrix outside the base program"});
    } else if (auto* mm = std::get_if<MatMulLine>(&b)) {
      int m = mm->matrix;
      bool transposed = false;
      while (auto* t2 = std::get_if<TransposeLine>(&ext.line(m).body)) {
        m = t2->source;
        transposed = !transposed;
      }
      if (!transposed)
        out.push_back({l, "new product must use a transposed matrix"});
      if (!is_new(mm->vec))
        out.push_back({l, "new product argument must be a new vector"});
    } else if (std::holds_alternative<VecInLine>(b)) {
      if (spec.mean_of(l) != 0.0)
        out.push_back({l, "new input vector must have zero mean"});
      for (const auto& [pr, v] : spec.cov) {
        const bool touches = pr.first == l || pr.second == l;
        const bool crosses = is_new(pr.first) != is_new(pr.second);
        if (touches && crosses && v != 0.0)
          out.push_back({l, "new input vector must be independent of the base program inputs"});
      }
    }
  }
  if (!out.empty()) return out;

  // Numeric oddness check on a scalar surrogate.
  Surrogate sur{ext, reg, fwd.size(), {}, {}};
  sur.old_vals.resize(static_cast<size_t>(ext.size()) + 1);
  sur.mat_vals.resize(static_cast<size_t>(ext.size()) + 1);
  NormalStream rng(mix(seed, 0x0ddce57ULL));
  for (int it = 0; it < 64; ++it) {
    std::vector<double> vins(static_cast<size_t>(ext.size()) + 1, 0.0);
    for (int l = 1; l <= ext.size(); ++l) {
      if (l <= fwd.size() && ext.is_vec(l))
        sur.old_vals[static_cast<size_t>(l)] = rng.next();
      if (!ext.is_vec(l)) sur.mat_vals[static_cast<size_t>(l)] = rng.next();
      if (l > fwd.size() &&
          std::holds_alternative<VecInLine>(ext.line(l).body))
        vins[static_cast<size_t>(l)] = rng.next();
    }
    std::vector<double> plus = sur.run(vins, 1.0);
    std::vector<double> minus = sur.run(vins, -1.0);
    size_t idx = 0;
    for (int l = fwd.size() + 1; l <= ext.size(); ++l) {
      if (!ext.is_vec(l)) continue;
      if (std::fabs(plus[idx] + minus[idx]) >
          1e-9 * (1.0 + std::fabs(plus[idx]))) {
        out.push_back({l, "new vector is not an odd function of the new inputs"});
        return out;
      }
      ++idx;
    }
  }
  return out;
}

std::pair<LimitTable, RankDiagnostics> compute_limits_backprop(
    const Skeleton& fwd, const Skeleton& ext, const CdcPartition& cdc,
    const SamplingSpec& spec, ExpectationMethod method, const Registry& reg) {
  auto diags = check_extension(fwd, ext, spec, reg);
  if (!diags.empty())
    throw std::invalid_argument("invalid extension: line " +
                                std::to_string(diags.front().line) + ": " +
                                diags.front().message);
  LimitEngine eng(ext, cdc, spec, method, reg, true);
  eng.process_all();
  return {eng.table(), eng.take_diagnostics()};
}

double limit_moment(const LimitTable& table, const CdcPartition& cdc, int cls,
                    const ExprPtr& phi, ExpectationMethod method,
                    const Registry& reg) {
  const auto& lines = cdc.classes.at(static_cast<size_t>(cls));
  for (int leaf : expr_leaves(phi))
    if (std::find(lines.begin(), lines.end(), leaf) == lines.end())
      throw std::invalid_argument("leaf line " + std::to_string(leaf) +
                                  " is outside the requested class");
  GaussianSpec gs;
  gs.labels = lines;
  const Eigen::Index d = static_cast<Eigen::Index>(lines.size());
  gs.mean.resize(d);
  gs.cov.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    gs.mean(i) = table.mu_of(lines[static_cast<size_t>(i)]);
    for (Eigen::Index j = 0; j <= i; ++j)
      gs.cov(i, j) = gs.cov(j, i) =
          table.k_of(lines[static_cast<size_t>(i)], lines[static_cast<size_t>(j)]);
  }
  return expect_scalar(phi, gs, method, reg);
}

}  // namespace tp
