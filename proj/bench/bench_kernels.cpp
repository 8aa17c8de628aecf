// Microbenchmarks comparing the OpenMP kernels against their serial
// reference paths: Monte Carlo expectations and finite-width realization.

#include <benchmark/benchmark.h>

#include <Eigen/Dense>

#include "tp/cdc.hpp"
#include "tp/expr.hpp"
#include "tp/gaussian.hpp"
#include "tp/limits.hpp"
#include "tp/program.hpp"
#include "tp/simulate.hpp"

#ifdef TP_HAVE_OPENMP
#include <omp.h>
#endif

namespace {

using namespace tp;

GaussianSpec bench_gaussian(int d) {
  GaussianSpec gs;
  gs.labels.resize(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) gs.labels[static_cast<size_t>(i)] = i + 1;
  gs.mean = Eigen::VectorXd::Constant(d, 0.1);
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j <= i; ++j) f(i, j) = 1.0 / (1.0 + i + j);
  gs.cov = f * f.transpose() + Eigen::MatrixXd::Identity(d, d);
  return gs;
}

std::vector<ExprPtr> bench_fns(int d) {
  std::vector<ExprPtr> fns;
  for (int i = 1; i <= d; ++i)
    for (int j = i; j <= d; ++j)
      fns.push_back(make_apply(
          {"mul", {}, -1},
          {make_apply({"tanh", {}, -1}, {make_leaf(i)}), make_leaf(j)}));
  return fns;
}

void bm_expect_mc(benchmark::State& state, bool parallel) {
  const int d = 5;  // beyond the quadrature dimension cap
  GaussianSpec gs = bench_gaussian(d);
  std::vector<ExprPtr> fns = bench_fns(d);
  ExpectationMethod m = ExpectationMethod::mc(
      static_cast<long long>(state.range(0)), 42, parallel);
  for (auto _ : state) {
    ExpectResult r = expect(fns, gs, m);
    benchmark::DoNotOptimize(r.gram.data());
  }
}

ParsedProgram bench_program() {
  return parse_program(R"(
syntax original
input vec x : n
sample x mean = 0.2
sample cov(x, x) = 1
input vec b : n
sample cov(b, b) = 0.25
input mat W : n x n
sample W sigma = 1.2
input mat V : n x n
h1 = tanh(x)
g1 = W * h1
s1 = g1 + b
h2 = tanh(s1)
g2 = V * h2
)");
}

void bm_realize(benchmark::State& state, int threads) {
#ifdef TP_HAVE_OPENMP
  omp_set_num_threads(threads);
#else
  if (threads != 1) {
    state.SkipWithError("built without OpenMP");
    return;
  }
#endif
  ParsedProgram p = bench_program();
  CdcPartition cdc = compute_cdc(p.sk, p.lam);
  std::vector<long> widths = resolve_widths(cdc, p.spec, state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) {
    Realization r = realize(p.sk, cdc, p.spec, widths, ++seed);
    benchmark::DoNotOptimize(r.vec.rbegin()->second.data());
  }
}

void bm_limit_quad(benchmark::State& state) {
  ParsedProgram p = bench_program();
  CdcPartition cdc = compute_cdc(p.sk, p.lam);
  ExpectationMethod m = ExpectationMethod::quad(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    auto [table, diag] = compute_limits_no_transpose(p.sk, cdc, p.spec, m);
    benchmark::DoNotOptimize(table.k.size());
  }
}

}  // namespace

BENCHMARK_CAPTURE(bm_expect_mc, serial, false)->Arg(100000)->Arg(400000)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(bm_expect_mc, parallel, true)->Arg(100000)->Arg(400000)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(bm_realize, serial, 1)->Arg(1024)->Arg(4096)
    ->Unit(benchmark::kMillisecond);
#ifdef TP_HAVE_OPENMP
BENCHMARK_CAPTURE(bm_realize, parallel, 8)->Arg(1024)->Arg(4096)
    ->Unit(benchmark::kMillisecond);
#endif
BENCHMARK(bm_limit_quad)->Arg(20)->Arg(40)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
