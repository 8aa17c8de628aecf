// Command-line front end: parse program files, compute scaling limits,
// detranspose, run finite-width simulation studies, and run the built-in
// architecture demos.  Reports are JSON (optionally CSV) with one row per
// measured quantity.

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "tp/apps.hpp"
#include "tp/cdc.hpp"
#include "tp/detranspose.hpp"
#include "tp/expr.hpp"
#include "tp/gaussian.hpp"
#include "tp/limits.hpp"
#include "tp/program.hpp"
#include "tp/rng.hpp"
#include "tp/simulate.hpp"

#ifdef TP_HAVE_OPENMP
#include <omp.h>
#endif

namespace {

using nlohmann::json;
using namespace tp;

constexpr const char* kVersion = "0.1.0";

struct CommonOpts {
  std::uint64_t seed = 0;
  int trials = 10;
  std::string widths = "1024";
  long long mc_samples = kMcSamplesDefault;
  int quad_points = kQuadPointsDefault;
  bool coupled = false;
  std::string method = "auto";
  std::string out;
  std::string csv;

  ExpectationMethod expectation() const {
    ExpectationMethod m;
    if (method == "quad")
      m.kind = ExpectationMethod::Kind::Quadrature;
    else if (method == "mc")
      m.kind = ExpectationMethod::Kind::MonteCarlo;
    else if (method == "auto")
      m.kind = ExpectationMethod::Kind::Auto;
    else
      throw std::invalid_argument("unknown method '" + method + "'");
    m.points = quad_points;
    m.samples = mc_samples;
    m.seed = seed;
    return m;
  }
  std::vector<long> width_list() const {
    std::vector<long> out_w;
    std::stringstream ss(widths);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out_w.push_back(std::stol(item));
    if (out_w.empty()) throw std::invalid_argument("empty width list");
    return out_w;
  }
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--seed", o.seed, "root random seed");
  cmd->add_option("--trials", o.trials, "independent trials per width");
  cmd->add_option("--widths", o.widths, "comma-separated base widths");
  cmd->add_option("--mc-samples", o.mc_samples, "Monte Carlo sample count");
  cmd->add_option("--quad-points", o.quad_points, "Gauss-Hermite points");
  cmd->add_flag("--coupled", o.coupled, "couple realizations across widths");
  cmd->add_option("--method", o.method, "expectation method: auto|quad|mc");
  cmd->add_option("--out", o.out, "write JSON report to this file");
  cmd->add_option("--csv", o.csv, "also write rows as CSV to this file");
}

ParsedProgram load_program(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  ParsedProgram p = parse_program(ss.str());
  auto diags = validate(p.sk, p.lam);
  if (!diags.empty()) {
    for (const auto& d : diags)
      std::cerr << path << ": line " << d.line << ": " << d.message << "\n";
    throw std::invalid_argument("program failed validation");
  }
  return p;
}

// ---------------------------------------------------------------------------
// Tiny observable-expression parser: names are program vars, fn{p}(...) are
// registry nonlinearities, with +, -, * and numeric literals.

class PhiParser {
 public:
  PhiParser(const std::string& text, const Skeleton& sk, const Registry& reg)
      : s_(text), sk_(sk), reg_(reg) {}

  ExprPtr parse() {
    ExprPtr e = sum();
    skip_ws();
    if (pos_ != s_.size()) fail("trailing characters");
    return e;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument("observable expression: " + msg +
                                " at offset " + std::to_string(pos_));
  }
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_])))
      ++pos_;
  }
  bool accept(char c) {
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }
  ExprPtr sum() {
    std::vector<std::pair<double, ExprPtr>> terms;
    terms.emplace_back(1.0, product());
    while (true) {
      if (accept('+'))
        terms.emplace_back(1.0, product());
      else if (accept('-'))
        terms.emplace_back(-1.0, product());
      else
        break;
    }
    if (terms.size() == 1 && terms[0].first == 1.0) return terms[0].second;
    return make_affine(std::move(terms));
  }
  ExprPtr product() {
    ExprPtr e = factor();
    while (accept('*'))
      e = make_apply({"mul", {}, -1}, {e, factor()});
    return e;
  }
  ExprPtr factor() {
    skip_ws();
    if (accept('(')) {
      ExprPtr e = sum();
      if (!accept(')')) fail("expected ')'");
      return e;
    }
    if (accept('-')) return make_affine({{-1.0, factor()}});
    if (pos_ < s_.size() &&
        (std::isdigit(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.')) {
      size_t used = 0;
      double v = std::stod(s_.substr(pos_), &used);
      pos_ += used;
      return make_const(v);
    }
    size_t start = pos_;
    while (pos_ < s_.size() &&
           (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_'))
      ++pos_;
    if (pos_ == start) fail("expected a variable, number, or function");
    std::string name = s_.substr(start, pos_ - start);
    skip_ws();
    if (pos_ < s_.size() && (s_[pos_] == '(' || s_[pos_] == '{')) {
      NonlinRef fn{name, {}, -1};
      if (accept('{')) {
        do {
          skip_ws();
          size_t used = 0;
          fn.params.push_back(std::stod(s_.substr(pos_), &used));
          pos_ += used;
        } while (accept(','));
        if (!accept('}')) fail("expected '}'");
      }
      if (!accept('(')) fail("expected '('");
      std::vector<ExprPtr> args;
      args.push_back(sum());
      while (accept(',')) args.push_back(sum());
      if (!accept(')')) fail("expected ')'");
      if (!reg_.has(fn.name)) fail("unknown function '" + fn.name + "'");
      return make_apply(std::move(fn), std::move(args));
    }
    int line = sk_.by_name(name);
    if (line == 0) fail("unknown variable '" + name + "'");
    if (!sk_.is_vec(line)) fail("'" + name + "' is a matrix variable");
    return make_leaf(line);
  }

  std::string s_;
  size_t pos_ = 0;
  const Skeleton& sk_;
  const Registry& reg_;
};

// ---------------------------------------------------------------------------
// Reporting.

json spec_json(const Skeleton& sk, const SamplingSpec& spec) {
  json j = json::object();
  json sigma = json::object(), mean = json::object(), cov = json::object();
  for (const auto& [l, v] : spec.sigma) sigma[sk.line(l).name] = v;
  for (const auto& [l, v] : spec.mean) mean[sk.line(l).name] = v;
  for (const auto& [pr, v] : spec.cov)
    cov[sk.line(pr.first).name + "," + sk.line(pr.second).name] = v;
  j["sigma"] = sigma;
  j["mean"] = mean;
  j["cov"] = cov;
  j["scale"] = spec.scale;
  j["width"] = spec.width;
  return j;
}

json row_json(const ReportRow& r) {
  return json{{"quantity", r.quantity}, {"width", r.width},
              {"empirical", r.empirical}, {"stderr", r.stderr_},
              {"theory", r.theory},       {"rel_err", r.rel_err}};
}

struct Report {
  std::string program;
  json spec = json::object();
  std::vector<ReportRow> rows;
  std::vector<std::string> diagnostics;
  json extra = json::object();  // subcommand-specific additions (mu, K, ...)
};

void emit(const Report& rep, const CommonOpts& o) {
  json j;
  j["program"] = rep.program;
  j["spec"] = rep.spec;
  j["rows"] = json::array();
  for (const auto& r : rep.rows) j["rows"].push_back(row_json(r));
  j["diagnostics"] = rep.diagnostics;
  j["versions"] = json{{"tp", kVersion}};
  for (auto it = rep.extra.begin(); it != rep.extra.end(); ++it)
    j[it.key()] = it.value();
  std::string text = j.dump(2) + "\n";
  if (o.out.empty()) {
    std::cout << text;
  } else {
    std::ofstream f(o.out);
    if (!f) throw std::invalid_argument("cannot write '" + o.out + "'");
    f << text;
  }
  if (!o.csv.empty()) {
    std::ofstream f(o.csv);
    if (!f) throw std::invalid_argument("cannot write '" + o.csv + "'");
    f << "quantity,width,empirical,stderr,theory,rel_err\n";
    f.precision(17);
    for (const auto& r : rep.rows)
      f << r.quantity << "," << r.width << "," << r.empirical << ","
        << r.stderr_ << "," << r.theory << "," << r.rel_err << "\n";
  }
}

// Measure a list of observables on one program: one realization per trial,
// all observables evaluated on it.
struct Probe {
  std::string quantity;
  ExprPtr phi;
  double theory = 0;
};

std::vector<ReportRow> run_probes(const Skeleton& sk, const CdcPartition& cdc,
                                  const SamplingSpec& spec,
                                  const std::vector<Probe>& probes,
                                  const std::vector<long>& base_widths,
                                  const CommonOpts& o,
                                  const Registry& reg = Registry::standard()) {
  std::vector<ReportRow> rows;
  for (long base : base_widths) {
    std::vector<long> widths = resolve_widths(cdc, spec, base);
    const size_t np = probes.size();
    std::vector<std::vector<double>> vals(
        np, std::vector<double>(static_cast<size_t>(o.trials)));
#ifdef TP_HAVE_OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int t = 0; t < o.trials; ++t) {
      Realization r = realize(sk, cdc, spec, widths,
                              mix(o.seed, static_cast<std::uint64_t>(t)),
                              o.coupled, reg);
      for (size_t p = 0; p < np; ++p) {
        int cls = cdc.vec_class(expr_leaves(probes[p].phi).front());
        vals[p][static_cast<size_t>(t)] =
            empirical_moment(r, cdc, cls, probes[p].phi, reg);
      }
    }
    for (size_t p = 0; p < np; ++p) {
      double mean = 0;
      for (double v : vals[p]) mean += v;
      mean /= o.trials;
      double var = 0;
      for (double v : vals[p]) var += (v - mean) * (v - mean);
      var = o.trials > 1 ? var / (o.trials - 1) : 0.0;
      ReportRow row;
      row.quantity = probes[p].quantity;
      row.width = base;
      row.empirical = mean;
      row.stderr_ = std::sqrt(var / o.trials);
      row.theory = probes[p].theory;
      row.rel_err = std::fabs(mean - row.theory) /
                    std::max(std::fabs(row.theory), 1e-12);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Subcommands.

int cmd_check(const std::string& file) {
  ParsedProgram p = load_program(file);
  CdcPartition cdc = compute_cdc(p.sk, p.lam);
  std::cout << "program: " << file << " (" << p.sk.size() << " lines)\n";
  std::cout << "dimension classes: " << cdc.num_classes() << "\n";
  for (int c = 0; c < cdc.num_classes(); ++c) {
    std::cout << "  class " << c;
    if (!cdc.class_label[static_cast<size_t>(c)].empty())
      std::cout << " [" << cdc.class_label[static_cast<size_t>(c)] << "]";
    std::cout << ":";
    for (int l : cdc.closure(c)) std::cout << " " << p.sk.line(l).name;
    std::cout << "\n";
  }
  for (const auto& [l, sides] : cdc.matrix_sides)
    std::cout << "  matrix " << p.sk.line(l).name << ": rows class "
              << sides.first << ", cols class " << sides.second << "\n";
  return 0;
}

int cmd_cdc(const std::string& file, const CommonOpts& o) {
  ParsedProgram p = load_program(file);
  CdcPartition cdc = compute_cdc(p.sk, p.lam);
  Report rep;
  rep.program = render_program(p.sk, p.lam, p.spec);
  rep.spec = spec_json(p.sk, p.spec);
  json classes = json::array();
  for (int c = 0; c < cdc.num_classes(); ++c) {
    json cls;
    cls["id"] = c;
    cls["label"] = cdc.class_label[static_cast<size_t>(c)];
    json members = json::array();
    for (int l : cdc.closure(c)) members.push_back(p.sk.line(l).name);
    cls["members"] = members;
    classes.push_back(cls);
  }
  json mats = json::object();
  for (const auto& [l, sides] : cdc.matrix_sides)
    mats[p.sk.line(l).name] = json::array({sides.first, sides.second});
  rep.extra["classes"] = classes;
  rep.extra["matrix_sides"] = mats;
  emit(rep, o);
  return 0;
}

json table_json(const Skeleton& sk, const LimitTable& table) {
  json mu = json::object(), k = json::object();
  for (const auto& [l, v] : table.mu) mu[sk.line(l).name] = v;
  for (const auto& [pr, v] : table.k)
    k[sk.line(pr.first).name + "," + sk.line(pr.second).name] = v;
  return json{{"mu", mu}, {"K", k}};
}

int cmd_limit(const std::string& file, const CommonOpts& o) {
  ParsedProgram p = load_program(file);
  CdcPartition cdc = compute_cdc(p.sk, p.lam);
  Report rep;
  rep.program = render_program(p.sk, p.lam, p.spec);
  rep.spec = spec_json(p.sk, p.spec);
  bool has_transpose = false;
  for (int l = 1; l <= p.sk.size(); ++l)
    has_transpose |=
        std::holds_alternative<TransposeLine>(p.sk.line(l).body);
  if (!has_transpose) {
    auto [table, diag] =
        compute_limits_no_transpose(p.sk, cdc, p.spec, o.expectation());
    json t = table_json(p.sk, table);
    rep.extra["mu"] = t["mu"];
    rep.extra["K"] = t["K"];
    rep.extra["rank_diagnostics"] = diag.warnings;
    rep.diagnostics = diag.warnings;
  } else {
    DetransposeResult res =
        detranspose(p.sk, cdc, p.spec, o.expectation(), Registry::standard(),
                    p.lam);
    json t = table_json(res.check_sk, res.table);
    rep.extra["mu"] = t["mu"];
    rep.extra["K"] = t["K"];
    rep.extra["rank_diagnostics"] = res.diag.warnings;
    json phi = json::object();
    for (const auto& [orig, img] : res.phi)
      phi[p.sk.line(orig).name] = res.check_sk.line(img).name;
    rep.extra["phi"] = phi;
    rep.diagnostics = res.diag.warnings;
    rep.diagnostics.push_back(
        "program uses transposes; mu/K refer to its detransposed form "
        "(see phi for the variable mapping)");
  }
  emit(rep, o);
  return 0;
}

int cmd_detranspose(const std::string& file, const CommonOpts& o) {
  ParsedProgram p = load_program(file);
  CdcPartition cdc = compute_cdc(p.sk, p.lam);
  DetransposeResult res = detranspose(p.sk, cdc, p.spec, o.expectation(),
                                      Registry::standard(), p.lam);
  std::string text = render_program(res.check_sk, res.check_lam, res.check_spec);
  std::ostringstream comments;
  for (const auto& [orig, img] : res.phi)
    comments << "# phi: " << p.sk.line(orig).name << " -> "
             << res.check_sk.line(img).name << "\n";
  for (const auto& [orig, img] : res.phi_g)
    comments << "# phi_g: " << p.sk.line(orig).name << " -> "
             << res.check_sk.line(img).name << "\n";
  json coeffs = json::object();
  for (const auto& [line, rec] : res.coeffs) {
    json r;
    r["alpha"] = rec.alpha;
    r["a"] = std::vector<double>(rec.a.data(), rec.a.data() + rec.a.size());
    r["v"] = std::vector<double>(rec.v.data(), rec.v.data() + rec.v.size());
    json c = json::array();
    for (Eigen::Index i = 0; i < rec.C.rows(); ++i)
      c.push_back(std::vector<double>(rec.C.row(i).begin(), rec.C.row(i).end()));
    r["C"] = c;
    json partners = json::array();
    for (int h : rec.h_args) partners.push_back(p.sk.line(h).name);
    r["partners"] = partners;
    coeffs[p.sk.line(line).name] = r;
  }
  if (o.out.empty()) {
    std::cout << text << comments.str();
    std::cout << "# coeffs: " << coeffs.dump() << "\n";
  } else {
    std::ofstream f(o.out);
    if (!f) throw std::invalid_argument("cannot write '" + o.out + "'");
    f << text << comments.str();
    std::ofstream fc(o.out + ".coeffs.json");
    fc << coeffs.dump(2) << "\n";
  }
  return 0;
}

int cmd_simulate(const std::string& file, const std::string& phi_text,
                 const CommonOpts& o) {
  ParsedProgram p = load_program(file);
  CdcPartition cdc = compute_cdc(p.sk, p.lam);
  ExprPtr phi = PhiParser(phi_text, p.sk, Registry::standard()).parse();
  StudyOptions opt;
  opt.trials = o.trials;
  opt.seed = o.seed;
  opt.coupled = o.coupled;
  opt.method = o.expectation();
  SimulationReport sr =
      convergence_study(p.sk, cdc, p.spec, phi, o.width_list(), opt);
  Report rep;
  rep.program = render_program(p.sk, p.lam, p.spec);
  rep.spec = spec_json(p.sk, p.spec);
  rep.rows = sr.rows;
  emit(rep, o);
  return 0;
}

int cmd_compare(const std::string& file, const std::string& phi_text,
                const CommonOpts& o) {
  ParsedProgram p = load_program(file);
  CdcPartition cdc = compute_cdc(p.sk, p.lam);
  const Registry& reg = Registry::standard();
  ExprPtr phi = PhiParser(phi_text, p.sk, reg).parse();
  ExpectationMethod method = o.expectation();

  std::vector<int> leaves = expr_leaves(phi);
  int cls = cdc.vec_class(leaves.front());
  double det_theory = general_limit_moment(p.sk, cdc, p.spec, cls, phi,
                                           method, reg);

  // The uncorrected route treats transposed matrices as independent copies.
  std::map<int, ExprPtr> repl;
  for (int leaf : leaves)
    if (p.sk.kind(leaf) == VarKind::H) repl[leaf] = expand_definition(p.sk, leaf);
  ExprPtr phi_g = substitute(phi, repl);
  LimitEngine naive(p.sk, cdc, p.spec, method, reg, true);
  naive.process_all();
  double naive_theory = limit_moment(naive.table(), cdc, cls, phi_g, method, reg);

  StudyOptions opt;
  opt.trials = o.trials;
  opt.seed = o.seed;
  opt.coupled = o.coupled;
  opt.method = method;
  opt.theory = det_theory;
  opt.quantity = "detransposed";
  SimulationReport sr =
      convergence_study(p.sk, cdc, p.spec, phi, o.width_list(), opt);

  Report rep;
  rep.program = render_program(p.sk, p.lam, p.spec);
  rep.spec = spec_json(p.sk, p.spec);
  rep.rows = sr.rows;
  for (const ReportRow& r : sr.rows) {
    ReportRow n = r;
    n.quantity = "naive";
    n.theory = naive_theory;
    n.rel_err = std::fabs(n.empirical - n.theory) /
                std::max(std::fabs(n.theory), 1e-12);
    rep.rows.push_back(std::move(n));
  }
  emit(rep, o);
  return 0;
}

// ---------------------------------------------------------------------------
// Demos.

std::vector<Eigen::VectorXd> demo_inputs(int count, int dim,
                                         std::uint64_t seed) {
  std::vector<Eigen::VectorXd> xs;
  NormalStream s(mix(seed, 0x64656d6f5f696e73ULL));
  for (int i = 0; i < count; ++i) {
    Eigen::VectorXd x(dim);
    for (int j = 0; j < dim; ++j) x(j) = s.next();
    xs.push_back(std::move(x));
  }
  return xs;
}

ArchSpec demo_arch(Arch variant, int depth, std::uint64_t seed) {
  ArchSpec a;
  a.variant = variant;
  a.depth = depth;
  a.activation = "tanh";
  a.sigma_w = {1.2};
  a.sigma_b = {0.4};
  a.inputs = demo_inputs(2, 6, seed);
  return a;
}

Report demo_semicircle(long n, int kmax, CommonOpts& o) {
  BuiltProgram bp = goe_program(kmax);
  std::vector<Probe> probes;
  for (int j = 1; j <= kmax; ++j)
    probes.push_back({"moment[" + std::to_string(j) + "]",
                      make_apply({"mul", {}, -1},
                                 {make_leaf(bp.preact[{0, 0}]),
                                  make_leaf(bp.preact[{j, 0}])}),
                      goe_moment(j)});
  Report rep;
  rep.program = render_program(bp.sk, bp.lam, bp.spec);
  rep.spec = spec_json(bp.sk, bp.spec);
  rep.rows = run_probes(bp.sk, bp.cdc, bp.spec, probes, {n}, o);
  return rep;
}

Report demo_mp(long n, int kmax, double alpha, CommonOpts& o) {
  BuiltProgram bp = mp_program(kmax, alpha);
  std::vector<Probe> probes;
  for (int j = 1; j <= kmax; ++j)
    probes.push_back({"moment[" + std::to_string(j) + "]",
                      make_apply({"mul", {}, -1},
                                 {make_leaf(bp.preact[{0, 0}]),
                                  make_leaf(bp.preact[{j, 0}])}),
                      mp_moment(j, alpha)});
  Report rep;
  rep.program = render_program(bp.sk, bp.lam, bp.spec);
  rep.spec = spec_json(bp.sk, bp.spec);
  rep.rows = run_probes(bp.sk, bp.cdc, bp.spec, probes, {n}, o);
  return rep;
}

Report demo_mlp_gp(long n, CommonOpts& o) {
  ArchSpec a = demo_arch(Arch::Mlp, 3, o.seed);
  BuiltProgram bp = build_program(a);
  std::vector<Eigen::MatrixXd> sigma = mlp_sigma(a, o.expectation());
  const double ro2 = 1.2 * 1.2;  // readout sigma_w^2 (broadcast)
  const int b = static_cast<int>(a.inputs.size());
  std::vector<Probe> probes;
  for (int i = 0; i < b; ++i)
    for (int j = i; j < b; ++j) {
      ExprPtr prod = make_apply({"mul", {}, -1},
                                {make_leaf(bp.act[{a.depth, i}]),
                                 make_leaf(bp.act[{a.depth, j}])});
      probes.push_back({"Sigma[" + std::to_string(i) + "," + std::to_string(j) +
                            "]",
                        make_affine({{ro2, prod}}),
                        sigma.back()(i, j)});
    }
  Report rep;
  rep.program = render_program(bp.sk, bp.lam, bp.spec);
  rep.spec = spec_json(bp.sk, bp.spec);
  rep.rows = run_probes(bp.sk, bp.cdc, bp.spec, probes, {n}, o);
  return rep;
}

Report demo_ntk(long n, bool gmp, CommonOpts& o) {
  ArchSpec a = demo_arch(Arch::Mlp, gmp ? 3 : 2, o.seed);
  Eigen::MatrixXd theory =
      gmp ? mlp_ntk_gmp(a, o.expectation()) : mlp_ntk(a, o.expectation());
  Eigen::MatrixXd emp =
      empirical_ntk(a, n, o.trials, mix(o.seed, 0x6e746bULL), gmp);
  Report rep;
  rep.program = gmp ? "demo:ntk-gmp" : "demo:mlp-ntk";
  const int b = static_cast<int>(a.inputs.size());
  for (int i = 0; i < b; ++i)
    for (int j = i; j < b; ++j) {
      ReportRow row;
      row.quantity =
          "NTK[" + std::to_string(i) + "," + std::to_string(j) + "]";
      row.width = n;
      row.empirical = emp(i, j);
      row.stderr_ = 0;
      row.theory = theory(i, j);
      row.rel_err = std::fabs(row.empirical - row.theory) /
                    std::max(std::fabs(row.theory), 1e-12);
      rep.rows.push_back(std::move(row));
    }
  return rep;
}

Report demo_signal_prop(long n, CommonOpts& o) {
  ArchSpec a = demo_arch(Arch::MlpBackward, 3, o.seed);
  BuiltProgram bp = build_program(a);
  SignalProp sp = signal_prop(a, true, o.expectation());
  const int b = static_cast<int>(a.inputs.size());
  std::vector<Probe> probes;
  for (int l = 1; l <= a.depth; ++l)
    for (int i = 0; i < b; ++i)
      for (int j = i; j < b; ++j) {
        probes.push_back(
            {"Sigma[" + std::to_string(l) + "][" + std::to_string(i) + "," +
                 std::to_string(j) + "]",
             make_apply({"mul", {}, -1}, {make_leaf(bp.preact[{l, i}]),
                                          make_leaf(bp.preact[{l, j}])}),
             sp.sigma[static_cast<size_t>(l) - 1](i, j)});
        probes.push_back(
            {"Pi[" + std::to_string(l) + "][" + std::to_string(i) + "," +
                 std::to_string(j) + "]",
             make_apply({"mul", {}, -1}, {make_leaf(bp.grad_act[{l, i}]),
                                          make_leaf(bp.grad_act[{l, j}])}),
             sp.pi[static_cast<size_t>(l) - 1](i, j)});
      }
  Report rep;
  rep.program = render_program(bp.sk, bp.lam, bp.spec);
  rep.spec = spec_json(bp.sk, bp.spec);
  rep.rows = run_probes(bp.sk, bp.cdc, bp.spec, probes, {n}, o);
  return rep;
}

Report demo_cnn(long n, CommonOpts& o) {
  ArchSpec a;
  a.variant = Arch::Cnn1dCircular;
  a.depth = 2;
  a.pixels = 3;
  a.activation = "tanh";
  a.sigma_w = {1.1};
  a.inputs = demo_inputs(3, 6, o.seed);
  BuiltProgram bp = build_program(a);
  SignalProp sp = signal_prop(a, false, o.expectation());
  std::vector<Probe> probes;
  for (int p = 0; p < a.pixels; ++p)
    for (int q = p; q < a.pixels; ++q)
      probes.push_back(
          {"Sigma[2][" + std::to_string(p) + "," + std::to_string(q) + "]",
           make_apply({"mul", {}, -1}, {make_leaf(bp.preact[{2, p}]),
                                        make_leaf(bp.preact[{2, q}])}),
           sp.sigma[1](p, q)});
  Report rep;
  rep.program = render_program(bp.sk, bp.lam, bp.spec);
  rep.spec = spec_json(bp.sk, bp.spec);
  rep.rows = run_probes(bp.sk, bp.cdc, bp.spec, probes, {n}, o);
  return rep;
}

Report demo_rnn(long n, CommonOpts& o) {
  ArchSpec a;
  a.variant = Arch::SimpleRnn;
  a.depth = 3;
  a.activation = "tanh";
  a.sigma_w = {1.3};
  a.sigma_b = {0.3};
  a.inputs = demo_inputs(3, 6, o.seed);
  BuiltProgram tied = build_program(a);
  ArchSpec au = a;
  au.rnn_tied = false;
  BuiltProgram untied = build_program(au);
  auto [table, diag] = compute_limits_no_transpose(untied.sk, untied.cdc,
                                                   untied.spec, o.expectation());
  std::vector<Probe> probes;
  for (int t = 1; t <= a.depth; ++t)
    probes.push_back(
        {"Sigma[" + std::to_string(t) + "]",
         make_apply({"mul", {}, -1}, {make_leaf(tied.preact[{t, 0}]),
                                      make_leaf(tied.preact[{t, 0}])}),
         table.k_of(untied.preact[{t, 0}], untied.preact[{t, 0}])});
  Report rep;
  rep.program = render_program(tied.sk, tied.lam, tied.spec);
  rep.spec = spec_json(tied.sk, tied.spec);
  rep.rows = run_probes(tied.sk, tied.cdc, tied.spec, probes, {n}, o);
  rep.diagnostics.push_back(
      "theory column computed from the untied-weights program");
  return rep;
}

Report demo_amp(CommonOpts& o) {
  AmpConfig cfg;
  cfg.seed = o.seed;
  AmpStateEvolution se = amp_state_evolution(cfg);
  std::vector<std::vector<double>> h(static_cast<size_t>(cfg.steps),
                                     std::vector<double>(
                                         static_cast<size_t>(o.trials)));
#ifdef TP_HAVE_OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (int t = 0; t < o.trials; ++t) {
    AmpConfig c = cfg;
    c.seed = mix(o.seed, static_cast<std::uint64_t>(t));
    AmpTrajectory tr = amp_run(c);
    for (int s = 0; s < cfg.steps; ++s)
      h[static_cast<size_t>(s)][static_cast<size_t>(t)] =
          tr.h_sq[static_cast<size_t>(s)];
  }
  Report rep;
  rep.program = "demo:amp";
  for (int s = 0; s < cfg.steps; ++s) {
    double mean = 0;
    for (double v : h[static_cast<size_t>(s)]) mean += v;
    mean /= o.trials;
    double var = 0;
    for (double v : h[static_cast<size_t>(s)]) var += (v - mean) * (v - mean);
    var = o.trials > 1 ? var / (o.trials - 1) : 0.0;
    ReportRow row;
    row.quantity = "h2[" + std::to_string(s + 1) + "]";
    row.width = cfg.N;
    row.empirical = mean;
    row.stderr_ = std::sqrt(var / o.trials);
    row.theory = se.tau_sq[static_cast<size_t>(s)];
    row.rel_err = std::fabs(mean - row.theory) /
                  std::max(std::fabs(row.theory), 1e-12);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

int cmd_demo(const std::string& name, long n, int k, double alpha,
             CommonOpts& o) {
  Report rep;
  if (name == "semicircle") {
    if (o.trials == 10) o.trials = 20;
    rep = demo_semicircle(n, k, o);
  } else if (name == "marchenko-pastur") {
    rep = demo_mp(n, k, alpha, o);
  } else if (name == "mlp-gp") {
    rep = demo_mlp_gp(n, o);
  } else if (name == "mlp-ntk") {
    if (o.trials == 10) o.trials = 20;
    rep = demo_ntk(n, false, o);
  } else if (name == "ntk-gmp") {
    if (o.trials == 10) o.trials = 20;
    rep = demo_ntk(n, true, o);
  } else if (name == "signal-prop") {
    rep = demo_signal_prop(n, o);
  } else if (name == "cnn") {
    rep = demo_cnn(n, o);
  } else if (name == "rnn") {
    rep = demo_rnn(n, o);
  } else if (name == "amp") {
    rep = demo_amp(o);
  } else {
    throw std::invalid_argument("unknown demo '" + name + "'");
  }
  emit(rep, o);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef TP_HAVE_OPENMP
  if (const char* t = std::getenv("TP_THREADS")) {
    int nt = std::atoi(t);
    if (nt > 0) omp_set_num_threads(nt);
  }
#endif
  CLI::App app{"tensor-program scaling limits and finite-width validation"};
  app.require_subcommand(1);

  std::string file, phi_text = "", demo_name;
  long demo_n = 4096;
  int demo_k = 6;
  double demo_alpha = 1.0;
  CommonOpts o;

  CLI::App* c_check = app.add_subcommand("check", "validate a program file");
  c_check->add_option("file", file)->required();

  CLI::App* c_cdc = app.add_subcommand("cdc", "dimension classes as JSON");
  c_cdc->add_option("file", file)->required();
  add_common(c_cdc, o);

  CLI::App* c_limit = app.add_subcommand("limit", "limit mean/covariance table");
  c_limit->add_option("file", file)->required();
  add_common(c_limit, o);

  CLI::App* c_det =
      app.add_subcommand("detranspose", "compile away transposed matrices");
  c_det->add_option("file", file)->required();
  add_common(c_det, o);

  CLI::App* c_sim =
      app.add_subcommand("simulate", "finite-width convergence study");
  c_sim->add_option("file", file)->required();
  c_sim->add_option("--phi", phi_text, "observable expression")->required();
  add_common(c_sim, o);

  CLI::App* c_cmp = app.add_subcommand(
      "compare", "empirical vs corrected and uncorrected theories");
  c_cmp->add_option("file", file)->required();
  c_cmp->add_option("--phi", phi_text, "observable expression")->required();
  add_common(c_cmp, o);

  CLI::App* c_demo = app.add_subcommand("demo", "built-in architecture demos");
  c_demo->add_option("name", demo_name)->required();
  c_demo->add_option("--n", demo_n, "base width");
  c_demo->add_option("--k", demo_k, "highest moment order");
  c_demo->add_option("--alpha", demo_alpha, "aspect ratio for marchenko-pastur");
  add_common(c_demo, o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_check->parsed()) return cmd_check(file);
    if (c_cdc->parsed()) return cmd_cdc(file, o);
    if (c_limit->parsed()) return cmd_limit(file, o);
    if (c_det->parsed()) return cmd_detranspose(file, o);
    if (c_sim->parsed()) return cmd_simulate(file, phi_text, o);
    if (c_cmp->parsed()) return cmd_compare(file, phi_text, o);
    if (c_demo->parsed()) return cmd_demo(demo_name, demo_n, demo_k,
                                          demo_alpha, o);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::logic_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
