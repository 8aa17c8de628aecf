#include "tp/simulate.hpp"

#include <cmath>
#include <stdexcept>

#include "tp/detranspose.hpp"
#include "tp/gaussian.hpp"
#include "tp/limits.hpp"
#include "tp/rng.hpp"

#ifdef TP_HAVE_OPENMP
#include <omp.h>
#endif

namespace tp {

namespace {

inline double mat_entry(const MatrixRef& ref, long i, long j) {
  if (ref.transposed) std::swap(i, j);
  return ref.scale *
         normal_at(ref.key, (static_cast<std::uint64_t>(i) << 32) |
                                static_cast<std::uint64_t>(j));
}

constexpr std::uint64_t kMatTag = 0x4d41545249585f5fULL;
constexpr std::uint64_t kVecTag = 0x494e505554564543ULL;

}  // namespace

Eigen::MatrixXd materialize(const MatrixRef& ref) {
  Eigen::MatrixXd out(ref.rows, ref.cols);
  for (long i = 0; i < ref.rows; ++i)
    for (long j = 0; j < ref.cols; ++j) out(i, j) = mat_entry(ref, i, j);
  return out;
}

Realization realize(const Skeleton& sk, const CdcPartition& cdc,
                    const SamplingSpec& spec, const std::vector<long>& widths,
                    std::uint64_t seed, bool coupled, const Registry& reg) {
  if (static_cast<int>(widths.size()) != cdc.num_classes())
    throw std::invalid_argument("one width required per dimension class");
  Realization r;
  r.widths = widths;
  r.seed = seed;

  // Input vectors of one class are jointly Gaussian per coordinate; sample
  // each class's inputs together through a shared factor.
  for (int c = 0; c < cdc.num_classes(); ++c) {
    std::vector<int> ins;
    for (int l : cdc.classes[static_cast<size_t>(c)])
      if (std::holds_alternative<VecInLine>(sk.line(l).body)) ins.push_back(l);
    if (ins.empty()) continue;
    const long n = widths[static_cast<size_t>(c)];
    const Eigen::Index d = static_cast<Eigen::Index>(ins.size());
    Eigen::VectorXd mu(d);
    Eigen::MatrixXd K(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
      mu(i) = spec.mean_of(ins[static_cast<size_t>(i)]);
      for (Eigen::Index j = 0; j < d; ++j)
        K(i, j) = spec.cov_of(ins[static_cast<size_t>(i)],
                              ins[static_cast<size_t>(j)]);
    }
    Eigen::MatrixXd L = psd_factor(K);
    const Eigen::Index rk = L.cols();
    std::uint64_t key = mix(seed, kVecTag + static_cast<std::uint64_t>(c));
    if (!coupled) key = mix(key, static_cast<std::uint64_t>(n));
    for (Eigen::Index i = 0; i < d; ++i)
      r.vec[ins[static_cast<size_t>(i)]].resize(n);
    Eigen::VectorXd xi(rk), z(d);
    for (long row = 0; row < n; ++row) {
      for (Eigen::Index cpt = 0; cpt < rk; ++cpt)
        xi(cpt) = normal_at(key, static_cast<std::uint64_t>(row) *
                                     static_cast<std::uint64_t>(d) +
                                 static_cast<std::uint64_t>(cpt));
      z = mu + L * xi;
      for (Eigen::Index i = 0; i < d; ++i)
        r.vec[ins[static_cast<size_t>(i)]](row) = z(i);
    }
  }

  // Matrices driving several products are materialized once instead of being
  // re-streamed per product; the accumulation order matches the streamed path
  // exactly, so results are bit-identical either way.
  using RowMat =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  std::map<int, int> product_count;  // base MatIn line -> #MatMul uses
  auto base_of = [&](int a) {
    while (auto* tr = std::get_if<TransposeLine>(&sk.line(a).body))
      a = tr->source;
    return a;
  };
  for (int l = 1; l <= sk.size(); ++l)
    if (auto* mm = std::get_if<MatMulLine>(&sk.line(l).body))
      ++product_count[base_of(mm->matrix)];
  std::map<std::uint64_t, RowMat> mat_cache;
  std::size_t cache_bytes = 0;
  constexpr std::size_t kCacheCapBytes = std::size_t{1536} << 20;

  std::vector<double> argbuf;
  for (int l = 1; l <= sk.size(); ++l) {
    const LineBody& b = sk.line(l).body;
    if (std::holds_alternative<VecInLine>(b)) {
      // sampled above
    } else if (std::holds_alternative<MatInLine>(b)) {
      const auto sides = cdc.matrix_sides.at(l);
      MatrixRef ref;
      ref.rows = widths[static_cast<size_t>(sides.first)];
      ref.cols = widths[static_cast<size_t>(sides.second)];
      ref.key = mix(seed, kMatTag + static_cast<std::uint64_t>(l));
      if (!coupled)
        ref.key = mix(ref.key, mix(static_cast<std::uint64_t>(ref.rows),
                                   static_cast<std::uint64_t>(ref.cols)));
      ref.scale = spec.sigma_of(l) / std::sqrt(static_cast<double>(ref.cols));
      r.mat[l] = ref;
    } else if (auto* tr = std::get_if<TransposeLine>(&b)) {
      MatrixRef ref = r.mat.at(tr->source);
      std::swap(ref.rows, ref.cols);
      ref.transposed = !ref.transposed;
      r.mat[l] = ref;
    } else if (auto* mm = std::get_if<MatMulLine>(&b)) {
      const MatrixRef& A = r.mat.at(mm->matrix);
      const Eigen::VectorXd& x = r.vec.at(mm->vec);
      Eigen::VectorXd y(A.rows);
      const long brows = A.transposed ? A.cols : A.rows;
      const long bcols = A.transposed ? A.rows : A.cols;
      auto it = mat_cache.find(A.key);
      if (it == mat_cache.end() &&
          product_count[base_of(mm->matrix)] > 1) {
        const std::size_t bytes = static_cast<std::size_t>(brows) *
                                  static_cast<std::size_t>(bcols) *
                                  sizeof(double);
        if (cache_bytes + bytes <= kCacheCapBytes) {
          MatrixRef base = A;
          base.transposed = false;
          base.rows = brows;
          base.cols = bcols;
          RowMat m(brows, bcols);
          for (long i = 0; i < brows; ++i)
            for (long j = 0; j < bcols; ++j) m(i, j) = mat_entry(base, i, j);
          it = mat_cache.emplace(A.key, std::move(m)).first;
          cache_bytes += bytes;
        }
      }
      if (it != mat_cache.end()) {
        const RowMat& m = it->second;
        if (!A.transposed) {
          for (long i = 0; i < A.rows; ++i) {
            double s = 0;
            for (long j = 0; j < A.cols; ++j) s += m(i, j) * x(j);
            y(i) = s;
          }
        } else {
          y.setZero();
          for (long j = 0; j < A.cols; ++j) {
            const double xj = x(j);
            for (long i = 0; i < A.rows; ++i) y(i) += m(j, i) * xj;
          }
        }
      } else {
        for (long i = 0; i < A.rows; ++i) {
          double s = 0;
          for (long j = 0; j < A.cols; ++j) s += mat_entry(A, i, j) * x(j);
          y(i) = s;
        }
      }
      r.vec[l] = std::move(y);
    } else if (auto* lc = std::get_if<LinCombLine>(&b)) {
      Eigen::VectorXd y =
          Eigen::VectorXd::Zero(r.vec.at(lc->terms.front().var).size());
      for (const auto& t : lc->terms) y += t.coeff * r.vec.at(t.var);
      r.vec[l] = std::move(y);
    } else {
      const NonlinRef* fn;
      const std::vector<int>* args;
      if (auto* nl = std::get_if<NonlinLine>(&b)) {
        fn = &nl->fn;
        args = &nl->args;
      } else {
        const auto& cp = std::get<CompLine>(b);
        fn = &cp.fn;
        args = &cp.args;
      }
      const long n = r.vec.at(args->front()).size();
      Eigen::VectorXd y(n);
      argbuf.resize(args->size());
      for (long i = 0; i < n; ++i) {
        for (size_t k = 0; k < args->size(); ++k)
          argbuf[k] = r.vec.at((*args)[k])(i);
        y(i) = apply_fn(reg, *fn, argbuf);
      }
      r.vec[l] = std::move(y);
    }
  }
  return r;
}

double empirical_moment(const Realization& r, const CdcPartition& cdc, int cls,
                        const ExprPtr& phi, const Registry& reg) {
  CompiledExpr ce(phi, reg);
  std::vector<const Eigen::VectorXd*> cols;
  for (int leaf : ce.leaf_lines()) {
    if (cdc.vec_class(leaf) != cls)
      throw std::invalid_argument("leaf line " + std::to_string(leaf) +
                                  " is outside the requested class");
    cols.push_back(&r.vec.at(leaf));
  }
  if (cols.empty()) return ce.eval({});
  const long n = cols.front()->size();
  std::vector<double> leafvals(cols.size());
  double acc = 0;
  for (long i = 0; i < n; ++i) {
    for (size_t k = 0; k < cols.size(); ++k) leafvals[k] = (*cols[k])(i);
    acc += ce.eval(leafvals);
  }
  return acc / static_cast<double>(n);
}

SimulationReport convergence_study(const Skeleton& sk, const CdcPartition& cdc,
                                   const SamplingSpec& spec, const ExprPtr& phi,
                                   const std::vector<long>& base_widths,
                                   const StudyOptions& opt, const Registry& reg) {
  if (opt.trials < 1) throw std::invalid_argument("at least one trial required");
  const std::vector<int> leaves = expr_leaves(phi);
  if (leaves.empty()) throw std::invalid_argument("phi has no leaves");
  const int cls = cdc.vec_class(leaves.front());

  double theory;
  if (opt.theory) {
    theory = *opt.theory;
  } else {
    bool has_transpose = false;
    for (int l = 1; l <= sk.size(); ++l)
      has_transpose |= std::holds_alternative<TransposeLine>(sk.line(l).body);
    if (has_transpose) {
      theory = general_limit_moment(sk, cdc, spec, cls, phi, opt.method, reg);
    } else {
      // Reduce H-var leaves to their expanded definitions over G-vars.
      std::map<int, ExprPtr> repl;
      for (int leaf : leaves)
        if (sk.kind(leaf) == VarKind::H)
          repl[leaf] = expand_definition(sk, leaf);
      auto [table, diag] =
          compute_limits_no_transpose(sk, cdc, spec, opt.method, reg);
      theory = limit_moment(table, cdc, cls, substitute(phi, repl), opt.method,
                            reg);
    }
  }

  SimulationReport rep;
  rep.trials = opt.trials;
  for (long base : base_widths) {
    std::vector<long> widths = resolve_widths(cdc, spec, base);
    std::vector<double> vals(static_cast<size_t>(opt.trials));
    std::vector<std::uint64_t> seeds(static_cast<size_t>(opt.trials));
    for (int t = 0; t < opt.trials; ++t)
      seeds[static_cast<size_t>(t)] =
          mix(opt.seed, static_cast<std::uint64_t>(t));
#ifdef TP_HAVE_OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int t = 0; t < opt.trials; ++t) {
      Realization r = realize(sk, cdc, spec, widths,
                              seeds[static_cast<size_t>(t)], opt.coupled, reg);
      vals[static_cast<size_t>(t)] = empirical_moment(r, cdc, cls, phi, reg);
    }
    if (rep.seeds.empty()) rep.seeds = seeds;
    double mean = 0;
    for (double v : vals) mean += v;
    mean /= opt.trials;
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var = opt.trials > 1 ? var / (opt.trials - 1) : 0.0;
    ReportRow row;
    row.quantity = opt.quantity;
    row.width = base;
    row.empirical = mean;
    row.stderr_ = std::sqrt(var / opt.trials);
    row.theory = theory;
    row.rel_err = std::fabs(mean - theory) /
                  std::max(std::fabs(theory), 1e-12);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace tp
