#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "tp/cdc.hpp"
#include "tp/expr.hpp"
#include "tp/program.hpp"
#include "tp/simulate.hpp"

#ifdef TP_HAVE_OPENMP
#include <omp.h>
#endif

using namespace tp;

namespace {

struct Prog {
  Skeleton sk;
  DimConstraints lam;
  SamplingSpec spec;
  CdcPartition cdc;
};

Prog load(const char* text) {
  ParsedProgram p = parse_program(text);
  REQUIRE(validate(p.sk, p.lam).empty());
  return {p.sk, p.lam, p.spec, compute_cdc(p.sk, p.lam)};
}

const char* kSmallNet = R"(
syntax original
input vec x : n
sample x mean = 0.4
sample cov(x, x) = 1
input vec b : n
sample cov(b, b) = 0.25
input mat W : n x n
sample W sigma = 1.3
h = tanh(x)
g = W * h
s = g + b
)";

}  // namespace

TEST_CASE("realizations are bit-reproducible") {
  Prog p = load(kSmallNet);
  std::vector<long> widths = resolve_widths(p.cdc, p.spec, 64);
  Realization a = realize(p.sk, p.cdc, p.spec, widths, 123);
  Realization b = realize(p.sk, p.cdc, p.spec, widths, 123);
  for (const auto& [l, v] : a.vec)
    CHECK((v.array() == b.vec.at(l).array()).all());
  for (const auto& [l, m] : a.mat)
    CHECK((materialize(m).array() == materialize(b.mat.at(l)).array()).all());
  Realization c = realize(p.sk, p.cdc, p.spec, widths, 124);
  CHECK(!(a.vec.at(1).array() == c.vec.at(1).array()).all());
}

TEST_CASE("coupled realizations nest across widths") {
  Prog p = load(kSmallNet);
  Realization small = realize(p.sk, p.cdc, p.spec,
                              resolve_widths(p.cdc, p.spec, 32), 9, true);
  Realization big = realize(p.sk, p.cdc, p.spec,
                            resolve_widths(p.cdc, p.spec, 64), 9, true);
  int x = p.sk.by_name("x");
  CHECK((small.vec.at(x).array() == big.vec.at(x).head(32).array()).all());
  int w = p.sk.by_name("W");
  Eigen::MatrixXd ms = materialize(small.mat.at(w));
  Eigen::MatrixXd mb = materialize(big.mat.at(w));
  // Entries share the counter stream; only the 1/sqrt(n) scale differs.
  Eigen::MatrixXd scaled =
      mb.topLeftCorner(32, 32) * (ms(0, 0) / mb(0, 0));
  CHECK((ms - scaled).norm() < 1e-12 * ms.norm());
}

TEST_CASE("exact cancellation in linear combinations") {
  Prog p = load(R"(
syntax original
input vec u : n
sample cov(u, u) = 1
z = u - u
)");
  Realization r = realize(p.sk, p.cdc, p.spec,
                          resolve_widths(p.cdc, p.spec, 256), 5);
  int z = p.sk.by_name("z");
  ExprPtr sq = make_apply({"mul", {}, -1}, {make_leaf(z), make_leaf(z)});
  CHECK(empirical_moment(r, p.cdc, p.cdc.vec_class(z), sq) == 0.0);
}

TEST_CASE("input moments concentrate at the declared values") {
  Prog p = load(kSmallNet);
  int x = p.sk.by_name("x");
  ExprPtr sq = make_apply({"mul", {}, -1}, {make_leaf(x), make_leaf(x)});
  double acc = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    Realization r = realize(p.sk, p.cdc, p.spec,
                            resolve_widths(p.cdc, p.spec, 4096),
                            1000 + static_cast<std::uint64_t>(t));
    acc += empirical_moment(r, p.cdc, p.cdc.vec_class(x), sq);
  }
  // E x^2 = 1 + 0.16; stderr ~ sqrt(2/4096)/sqrt(20) ~ 0.005.
  CHECK(acc / trials == doctest::Approx(1.16).epsilon(0.02));
}

TEST_CASE("H-vars evaluate through their defining nonlinearity") {
  Prog p = load(kSmallNet);
  Realization r = realize(p.sk, p.cdc, p.spec,
                          resolve_widths(p.cdc, p.spec, 128), 77);
  int x = p.sk.by_name("x"), h = p.sk.by_name("h");
  const Eigen::VectorXd& vx = r.vec.at(x);
  const Eigen::VectorXd& vh = r.vec.at(h);
  for (int i = 0; i < 128; ++i)
    CHECK(vh(i) == doctest::Approx(std::tanh(vx(i))).epsilon(1e-12));
}

TEST_CASE("matrix products use streamed entries consistently") {
  Prog p = load(kSmallNet);
  Realization r = realize(p.sk, p.cdc, p.spec,
                          resolve_widths(p.cdc, p.spec, 96), 3);
  int w = p.sk.by_name("W"), h = p.sk.by_name("h"), g = p.sk.by_name("g");
  Eigen::MatrixXd mw = materialize(r.mat.at(w));
  Eigen::VectorXd want = mw * r.vec.at(h);
  CHECK((r.vec.at(g) - want).norm() < 1e-9 * (1.0 + want.norm()));
}

TEST_CASE("convergence studies shrink toward the theoretical limit") {
  Prog p = load(kSmallNet);
  int s = p.sk.by_name("s");
  ExprPtr phi = make_apply({"mul", {}, -1}, {make_leaf(s), make_leaf(s)});
  StudyOptions opt;
  opt.trials = 8;
  opt.seed = 21;
  SimulationReport rep = convergence_study(p.sk, p.cdc, p.spec, phi,
                                           {256, 1024, 4096}, opt);
  REQUIRE(rep.rows.size() == 3);
  // Same theory column everywhere, and errors shrink with width.
  CHECK(rep.rows[0].theory == doctest::Approx(rep.rows[2].theory));
  CHECK(rep.rows[2].rel_err < 0.05);
  CHECK(rep.rows[2].rel_err < rep.rows[0].rel_err + 0.02);
  // The theory is the recursion's value sigma^2 E tanh^2 + var b.
  CHECK(rep.rows[0].theory > 0.0);
}

TEST_CASE("study results do not depend on the thread count") {
  Prog p = load(kSmallNet);
  int g = p.sk.by_name("g");
  ExprPtr phi = make_apply({"mul", {}, -1}, {make_leaf(g), make_leaf(g)});
  StudyOptions opt;
  opt.trials = 6;
  opt.seed = 3;
#ifdef TP_HAVE_OPENMP
  omp_set_num_threads(1);
#endif
  SimulationReport serial =
      convergence_study(p.sk, p.cdc, p.spec, phi, {128, 256}, opt);
#ifdef TP_HAVE_OPENMP
  omp_set_num_threads(4);
#endif
  SimulationReport par =
      convergence_study(p.sk, p.cdc, p.spec, phi, {128, 256}, opt);
  REQUIRE(serial.rows.size() == par.rows.size());
  for (size_t i = 0; i < serial.rows.size(); ++i) {
    CHECK(serial.rows[i].empirical == par.rows[i].empirical);
    CHECK(serial.rows[i].stderr_ == par.rows[i].stderr_);
  }
}

TEST_CASE("transposed programs route theory through detransposition") {
  Prog p = load(R"(
syntax original
input vec x : n
sample x mean = 0.7
sample cov(x, x) = 1
input mat W : n x n
trans Wt = W
g2 = W * x
input vec ones : n
sample ones mean = 1
sample cov(ones, ones) = 0
h3 = quadratic_bp(g2, ones)
g4 = Wt * h3
)");
  int g4 = p.sk.by_name("g4");
  StudyOptions opt;
  opt.trials = 10;
  opt.seed = 11;
  SimulationReport rep = convergence_study(p.sk, p.cdc, p.spec,
                                           make_leaf(g4), {2048}, opt);
  REQUIRE(rep.rows.size() == 1);
  CHECK(rep.rows[0].theory == doctest::Approx(0.7).epsilon(1e-6));
  CHECK(rep.rows[0].rel_err < 0.05);
}
