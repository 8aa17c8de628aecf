#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <map>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "random_programs.hpp"
#include "tp/cdc.hpp"
#include "tp/program.hpp"

using namespace tp;

using tptest::SlotOracle;

namespace {

Skeleton random_with_transposes(std::mt19937_64& rng) {
  Skeleton sk = tptest::random_transpose_free(rng, 8);
  // Append a transpose of a random matrix plus a product through it.
  std::vector<int> mats, vecs;
  for (int l = 1; l <= sk.size(); ++l)
    (sk.kind(l) == VarKind::A ? mats : vecs).push_back(l);
  if (!mats.empty()) {
    std::uniform_int_distribution<size_t> pm(0, mats.size() - 1);
    std::uniform_int_distribution<size_t> pv(0, vecs.size() - 1);
    int t = sk.add("T0", TransposeLine{mats[pm(rng)]});
    sk.add("pt", MatMulLine{t, vecs[pv(rng)]});
  }
  return sk;
}

}  // namespace

TEST_CASE("computed classes match the reachability oracle") {
  std::mt19937_64 rng(2024);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Skeleton sk = trial % 2 == 0 ? tptest::random_transpose_free(rng, 10)
                                 : random_with_transposes(rng);
    if (!validate(sk).empty()) continue;
    ++checked;
    CAPTURE(trial);
    CAPTURE(render_program(sk));
    CdcPartition cdc = compute_cdc(sk);
    SlotOracle oracle(sk);
    for (const auto& [a, sa] : oracle.vec_slot)
      for (const auto& [b, sb] : oracle.vec_slot) {
        bool lib = cdc.vec_class(a) == cdc.vec_class(b);
        CHECK(lib == oracle.same(sa, sb));
      }
    for (const auto& [m, sides] : cdc.matrix_sides) {
      // Library matrix sides agree with the oracle's slots.
      for (const auto& [v, sv] : oracle.vec_slot) {
        if (cdc.vec_class(v) == sides.first)
          CHECK(oracle.same(sv, oracle.mat_slot.at(m).first));
        if (cdc.vec_class(v) == sides.second)
          CHECK(oracle.same(sv, oracle.mat_slot.at(m).second));
      }
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("user constraints merge classes") {
  ParsedProgram p = parse_program(R"(
syntax original
input vec u : a
input vec v : b
input vec w
)");
  CdcPartition free_cdc = compute_cdc(p.sk, p.lam);
  CHECK(free_cdc.vec_class(1) != free_cdc.vec_class(2));

  DimConstraints lam;
  lam.pairs = {{1, 2}, {2, 3}};
  CHECK(!validate(p.sk, lam).empty());  // labels a and b forced together

  DimConstraints lam2;
  lam2.pairs = {{2, 3}};
  CdcPartition merged = compute_cdc(p.sk, lam2);
  CHECK(merged.vec_class(2) == merged.vec_class(3));
  CHECK(merged.vec_class(1) != merged.vec_class(2));
}

TEST_CASE("transpose swaps the matrix sides") {
  ParsedProgram p = parse_program(R"(
syntax original
input vec x : cols
input mat A : rows x cols
trans At = A
g = A * x
h = tanh(g)
y = At * h
)");
  REQUIRE(validate(p.sk, p.lam).empty());
  CdcPartition cdc = compute_cdc(p.sk, p.lam);
  int a = p.sk.by_name("A"), at = p.sk.by_name("At");
  CHECK(cdc.matrix_sides.at(a).first == cdc.matrix_sides.at(at).second);
  CHECK(cdc.matrix_sides.at(a).second == cdc.matrix_sides.at(at).first);
  CHECK(cdc.vec_class(p.sk.by_name("g")) == cdc.matrix_sides.at(a).first);
  CHECK(cdc.vec_class(p.sk.by_name("y")) ==
        cdc.vec_class(p.sk.by_name("x")));
  CHECK(cdc.hvar_class.at(p.sk.by_name("h")) ==
        cdc.vec_class(p.sk.by_name("g")));
}

TEST_CASE("width ratios come from label scales") {
  ParsedProgram p = parse_program(R"(
syntax original
input vec u : m
input mat A : m x n
input vec x : n
g = A * x
scale m = 0.5
scale n = 2
width m = 64
)");
  CdcPartition cdc = compute_cdc(p.sk, p.lam);
  int cm = cdc.vec_class(p.sk.by_name("u"));
  int cn = cdc.vec_class(p.sk.by_name("x"));
  CHECK(alpha_ratio(cdc, p.spec, cm, cn) == doctest::Approx(0.25));
  CHECK(alpha_ratio(cdc, p.spec, cn, cm) == doctest::Approx(4.0));
  CHECK(alpha_ratio(cdc, p.spec, cm, cm) == doctest::Approx(1.0));

  std::vector<long> widths = resolve_widths(cdc, p.spec, 100);
  CHECK(widths[static_cast<size_t>(cm)] == 64);   // explicit width wins
  CHECK(widths[static_cast<size_t>(cn)] == 200);  // base * scale
}
