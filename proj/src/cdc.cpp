#include "tp/cdc.hpp"

#include <algorithm>

#include "tp/nonlin.hpp"
#include <cmath>
#include <map>
#include <numeric>

namespace tp {

namespace {

class UnionFind {
 public:
  explicit UnionFind(int n) : parent_(n) {
    std::iota(parent_.begin(), parent_.end(), 0);
  }
  int add() {
    parent_.push_back(static_cast<int>(parent_.size()));
    return parent_.back();
  }
  int find(int x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(int a, int b) { parent_[find(a)] = find(b); }

 private:
  std::vector<int> parent_;
};

// Builds the merge structure shared by compute_cdc and validate.
struct Closure {
  UnionFind uf;
  std::vector<std::pair<int, int>> side;  // per A line; {-1,-1} otherwise
  std::map<std::string, int> label_node;

  Closure(const Skeleton& sk, const DimConstraints& lam)
      : uf(sk.size()), side(static_cast<size_t>(sk.size()), {-1, -1}) {
    auto node = [&](int line) { return line - 1; };
    auto label = [&](const std::string& s) {
      auto it = label_node.find(s);
      if (it != label_node.end()) return it->second;
      int n = uf.add();
      label_node.emplace(s, n);
      return n;
    };
    for (int l = 1; l <= sk.size(); ++l) {
      const LineBody& b = sk.line(l).body;
      if (auto* v = std::get_if<VecInLine>(&b)) {
        if (v->cdc_hint && !v->cdc_hint->empty())
          uf.unite(node(l), label(*v->cdc_hint));
      } else if (auto* m = std::get_if<MatInLine>(&b)) {
        side[node(l)] = {uf.add(), uf.add()};
        if (!m->rows_hint.empty())
          uf.unite(side[node(l)].first, label(m->rows_hint));
        if (!m->cols_hint.empty())
          uf.unite(side[node(l)].second, label(m->cols_hint));
      } else if (auto* t = std::get_if<TransposeLine>(&b)) {
        auto src = side[node(t->source)];
        side[node(l)] = {src.second, src.first};
      } else if (auto* mm = std::get_if<MatMulLine>(&b)) {
        auto s = side[node(mm->matrix)];
        uf.unite(node(l), s.first);
        uf.unite(node(mm->vec), s.second);
      } else if (auto* lc = std::get_if<LinCombLine>(&b)) {
        for (const auto& t2 : lc->terms) uf.unite(node(l), node(t2.var));
      } else if (auto* nl = std::get_if<NonlinLine>(&b)) {
        for (int a : nl->args) uf.unite(node(l), node(a));
      } else if (auto* cp = std::get_if<CompLine>(&b)) {
        for (int a : cp->args) uf.unite(node(l), node(a));
      }
    }
    for (const auto& [a, b2] : lam.pairs) uf.unite(node(a), node(b2));
  }
};

}  // namespace

int CdcPartition::vec_class(int line) const {
  int c = class_of.at(static_cast<size_t>(line));
  if (c >= 0) return c;
  return hvar_class.at(line);
}

std::vector<int> CdcPartition::closure(int cls) const {
  std::vector<int> out;
  for (int l = 1; l < static_cast<int>(class_of.size()); ++l) {
    if (class_of[static_cast<size_t>(l)] == cls) {
      out.push_back(l);
    } else {
      auto it = hvar_class.find(l);
      if (it != hvar_class.end() && it->second == cls) out.push_back(l);
    }
  }
  return out;
}

CdcPartition compute_cdc(const Skeleton& sk, const DimConstraints& lam) {
  Closure cl(sk, lam);
  CdcPartition out;
  out.class_of.assign(static_cast<size_t>(sk.size()) + 1, -1);

  std::map<int, int> class_of_root;
  auto class_for = [&](int root) {
    auto it = class_of_root.find(root);
    if (it != class_of_root.end()) return it->second;
    int id = static_cast<int>(out.classes.size());
    out.classes.emplace_back();
    out.class_label.emplace_back();
    class_of_root.emplace(root, id);
    return id;
  };

  for (int l = 1; l <= sk.size(); ++l) {
    if (sk.kind(l) != VarKind::G) continue;
    int c = class_for(cl.uf.find(l - 1));
    out.class_of[static_cast<size_t>(l)] = c;
    out.classes[static_cast<size_t>(c)].push_back(l);
  }
  for (int l = 1; l <= sk.size(); ++l) {
    if (sk.kind(l) == VarKind::H)
      out.hvar_class[l] = class_for(cl.uf.find(l - 1));
    if (sk.kind(l) == VarKind::A) {
      auto s = cl.side[static_cast<size_t>(l - 1)];
      out.matrix_sides[l] = {class_for(cl.uf.find(s.first)),
                             class_for(cl.uf.find(s.second))};
    }
  }
  for (const auto& [name, node] : cl.label_node) {
    int c = class_for(cl.uf.find(node));
    if (out.class_label[static_cast<size_t>(c)].empty())
      out.class_label[static_cast<size_t>(c)] = name;
  }
  return out;
}

std::vector<Diagnostic> validate(const Skeleton& sk, const DimConstraints& lam) {
  std::vector<Diagnostic> diags;
  auto bad = [&](int l, std::string msg) { diags.push_back({l, std::move(msg)}); };
  auto check_ref = [&](int l, int ref, bool vec_ok, bool a_ok) {
    if (ref < 1 || ref >= l) {
      bad(l, "reference to line " + std::to_string(ref) +
                 " is out of order or out of range");
      return false;
    }
    VarKind k = sk.kind(ref);
    if (k == VarKind::A && !a_ok) {
      bad(l, "matrix var where vector var expected");
      return false;
    }
    if (k != VarKind::A && !vec_ok) {
      bad(l, "vector var where matrix var expected");
      return false;
    }
    return true;
  };

  for (int l = 1; l <= sk.size(); ++l) {
    const LineBody& b = sk.line(l).body;
    if (auto* t = std::get_if<TransposeLine>(&b)) {
      if (t->source < 1 || t->source >= l || sk.kind(t->source) != VarKind::A)
        bad(l, "transpose requires A-var");
      else if (!std::holds_alternative<MatInLine>(sk.line(t->source).body))
        bad(l, "transpose source must be an input matrix");
    } else if (auto* mm = std::get_if<MatMulLine>(&b)) {
      if (mm->matrix < 1 || mm->matrix >= l || sk.kind(mm->matrix) != VarKind::A)
        bad(l, "matmul requires A-var matrix");
      check_ref(l, mm->vec, true, false);
    } else if (auto* lc = std::get_if<LinCombLine>(&b)) {
      if (lc->terms.empty()) bad(l, "empty linear combination");
      for (const auto& t2 : lc->terms)
        if (check_ref(l, t2.var, true, false) && sk.kind(t2.var) != VarKind::G)
          bad(l, "linear combination term must be a G-var");
    } else if (auto* nl = std::get_if<NonlinLine>(&b)) {
      if (nl->args.empty()) bad(l, "nonlinearity with no arguments");
      if (!Registry::standard().has(nl->fn.name))
        bad(l, "unknown nonlinearity '" + nl->fn.name + "'");
      for (int a : nl->args)
        if (check_ref(l, a, true, false) && sk.kind(a) != VarKind::G)
          bad(l, "Nonlin argument must be a G-var");
    } else if (auto* cp = std::get_if<CompLine>(&b)) {
      if (sk.syntax != SyntaxMode::Extended)
        bad(l, "Comp line requires extended syntax");
      if (cp->args.empty()) bad(l, "nonlinearity with no arguments");
      if (!Registry::standard().has(cp->fn.name))
        bad(l, "unknown nonlinearity '" + cp->fn.name + "'");
      for (int a : cp->args) check_ref(l, a, true, false);
    }
  }
  for (const auto& [a, b2] : lam.pairs) {
    for (int v : {a, b2}) {
      if (v < 1 || v > sk.size())
        diags.push_back({0, "constraint references missing line"});
      else if (sk.kind(v) != VarKind::G)
        diags.push_back({v, "dimension constraint must relate G-vars"});
    }
  }
  if (!diags.empty()) return diags;

  // Dimension-constraint satisfiability: two distinct user labels merged into
  // one class indicate conflicting hints.
  Closure cl(sk, lam);
  std::map<int, std::string> label_of_root;
  for (const auto& [name, node] : cl.label_node) {
    int root = cl.uf.find(node);
    auto it = label_of_root.find(root);
    if (it == label_of_root.end())
      label_of_root.emplace(root, name);
    else if (it->second != name)
      diags.push_back({0, "inconsistent dimension constraints: labels '" +
                              it->second + "' and '" + name +
                              "' are forced into one class"});
  }
  return diags;
}

double alpha_ratio(const CdcPartition& cdc, const SamplingSpec& spec, int c1,
                   int c2) {
  return spec.scale_of(cdc.class_label.at(static_cast<size_t>(c1))) /
         spec.scale_of(cdc.class_label.at(static_cast<size_t>(c2)));
}

std::vector<long> resolve_widths(const CdcPartition& cdc,
                                 const SamplingSpec& spec, long base) {
  std::vector<long> widths(static_cast<size_t>(cdc.num_classes()));
  for (int c = 0; c < cdc.num_classes(); ++c) {
    const std::string& label = cdc.class_label[static_cast<size_t>(c)];
    auto it = spec.width.find(label);
    if (!label.empty() && it != spec.width.end())
      widths[static_cast<size_t>(c)] = it->second;
    else
      widths[static_cast<size_t>(c)] = std::max<long>(
          1, std::lround(static_cast<double>(base) * spec.scale_of(label)));
  }
  return widths;
}

}  // namespace tp
