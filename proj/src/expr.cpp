#include "tp/expr.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>

namespace tp {

ExprPtr make_leaf(int line) {
  auto n = std::make_shared<ExprNode>();
  n->kind = ExprNode::Kind::Leaf;
  n->leaf = line;
  return n;
}

ExprPtr make_const(double c) {
  auto n = std::make_shared<ExprNode>();
  n->kind = ExprNode::Kind::Affine;
  n->constant = c;
  return n;
}

ExprPtr make_affine(std::vector<std::pair<double, ExprPtr>> terms,
                    double constant) {
  auto n = std::make_shared<ExprNode>();
  n->kind = ExprNode::Kind::Affine;
  n->constant = constant;
  n->terms = std::move(terms);
  return n;
}

ExprPtr make_apply(NonlinRef fn, std::vector<ExprPtr> args) {
  auto n = std::make_shared<ExprNode>();
  n->kind = ExprNode::Kind::Apply;
  n->fn = std::move(fn);
  n->args = std::move(args);
  return n;
}

namespace {

void collect_leaves(const ExprNode* e, std::set<int>& out,
                    std::set<const ExprNode*>& seen) {
  if (!seen.insert(e).second) return;
  switch (e->kind) {
    case ExprNode::Kind::Leaf:
      out.insert(e->leaf);
      break;
    case ExprNode::Kind::Affine:
      for (auto& [c, t] : e->terms) collect_leaves(t.get(), out, seen);
      break;
    case ExprNode::Kind::Apply:
      for (auto& a : e->args) collect_leaves(a.get(), out, seen);
      break;
  }
}

bool is_zero(const ExprPtr& e) {
  return e->kind == ExprNode::Kind::Affine && e->terms.empty() &&
         e->constant == 0.0;
}

}  // namespace

std::vector<int> expr_leaves(const ExprPtr& e) {
  std::set<int> s;
  std::set<const ExprNode*> seen;
  collect_leaves(e.get(), s, seen);
  return {s.begin(), s.end()};
}

ExprPtr substitute(const ExprPtr& e, const std::map<int, ExprPtr>& repl) {
  switch (e->kind) {
    case ExprNode::Kind::Leaf: {
      auto it = repl.find(e->leaf);
      return it == repl.end() ? e : it->second;
    }
    case ExprNode::Kind::Affine: {
      std::vector<std::pair<double, ExprPtr>> terms;
      terms.reserve(e->terms.size());
      for (auto& [c, t] : e->terms) terms.emplace_back(c, substitute(t, repl));
      return make_affine(std::move(terms), e->constant);
    }
    case ExprNode::Kind::Apply: {
      std::vector<ExprPtr> args;
      args.reserve(e->args.size());
      for (auto& a : e->args) args.push_back(substitute(a, repl));
      return make_apply(e->fn, std::move(args));
    }
  }
  return e;
}

namespace {

ExprPtr expand_rec(const Skeleton& sk, int var,
                   std::unordered_map<int, ExprPtr>& memo) {
  auto it = memo.find(var);
  if (it != memo.end()) return it->second;
  ExprPtr out;
  switch (sk.kind(var)) {
    case VarKind::G:
      out = make_leaf(var);
      break;
    case VarKind::A:
      throw std::invalid_argument("expand_definition of an A-var");
    case VarKind::H: {
      const NonlinRef* fn;
      const std::vector<int>* args;
      if (auto* nl = std::get_if<NonlinLine>(&sk.line(var).body)) {
        fn = &nl->fn;
        args = &nl->args;
      } else {
        auto* cp = std::get_if<CompLine>(&sk.line(var).body);
        fn = &cp->fn;
        args = &cp->args;
      }
      if (fn->name == "affine" && fn->deriv_arg < 0) {
        std::vector<std::pair<double, ExprPtr>> terms;
        for (size_t i = 0; i < args->size(); ++i)
          terms.emplace_back(i < fn->params.size() ? fn->params[i] : 1.0,
                             expand_rec(sk, (*args)[i], memo));
        out = make_affine(std::move(terms));
      } else {
        std::vector<ExprPtr> eargs;
        for (int a : *args) eargs.push_back(expand_rec(sk, a, memo));
        out = make_apply(*fn, std::move(eargs));
      }
      break;
    }
  }
  memo.emplace(var, out);
  return out;
}

}  // namespace

ExprPtr expand_definition(const Skeleton& sk, int var) {
  std::unordered_map<int, ExprPtr> memo;
  return expand_rec(sk, var, memo);
}

ExprPtr derivative(const ExprPtr& e, int leaf, const Registry& reg) {
  switch (e->kind) {
    case ExprNode::Kind::Leaf:
      return make_const(e->leaf == leaf ? 1.0 : 0.0);
    case ExprNode::Kind::Affine: {
      std::vector<std::pair<double, ExprPtr>> terms;
      for (auto& [c, t] : e->terms) {
        ExprPtr dt = derivative(t, leaf, reg);
        if (!is_zero(dt)) terms.emplace_back(c, dt);
      }
      if (terms.empty()) return make_const(0.0);
      return make_affine(std::move(terms));
    }
    case ExprNode::Kind::Apply: {
      std::vector<std::pair<double, ExprPtr>> terms;
      for (size_t i = 0; i < e->args.size(); ++i) {
        ExprPtr da = derivative(e->args[i], leaf, reg);
        if (is_zero(da)) continue;
        if (e->fn.deriv_arg >= 0)
          throw MissingDerivative("second derivative of " + e->fn.name);
        if (!reg.at(e->fn.name).has_partial(static_cast<int>(i)))
          throw MissingDerivative(e->fn.name + " partial " + std::to_string(i));
        NonlinRef dref = e->fn;
        dref.deriv_arg = static_cast<int>(i);
        ExprPtr partial = make_apply(dref, e->args);
        // chain rule: partial_i(args) * d args_i
        terms.emplace_back(1.0,
                           make_apply(NonlinRef{"mul", {}, -1},
                                      {partial, da}));
      }
      if (terms.empty()) return make_const(0.0);
      return make_affine(std::move(terms));
    }
  }
  return make_const(0.0);
}

std::map<int, double> linear_decompose(const Skeleton& sk, int g_line) {
  std::map<int, double> out;
  // DFS through LinComb lines, accumulating coefficients.
  std::vector<std::pair<int, double>> stack{{g_line, 1.0}};
  while (!stack.empty()) {
    auto [l, c] = stack.back();
    stack.pop_back();
    if (auto* lc = std::get_if<LinCombLine>(&sk.line(l).body)) {
      for (const auto& t : lc->terms) stack.emplace_back(t.var, c * t.coeff);
    } else {
      out[l] += c;
    }
  }
  return out;
}

CompiledExpr::CompiledExpr(const ExprPtr& e, const Registry& reg) {
  std::unordered_map<const ExprNode*, int> index;
  std::unordered_map<int, int> leaf_slot;

  // Collect leaves first for a deterministic slot order.
  for (int l : expr_leaves(e)) {
    leaf_slot[l] = static_cast<int>(leaf_lines_.size());
    leaf_lines_.push_back(l);
  }

  std::function<int(const ExprPtr&)> build = [&](const ExprPtr& n) -> int {
    auto it = index.find(n.get());
    if (it != index.end()) return it->second;
    Step s;
    s.kind = n->kind;
    switch (n->kind) {
      case ExprNode::Kind::Leaf:
        s.leaf_slot = leaf_slot.at(n->leaf);
        break;
      case ExprNode::Kind::Affine:
        s.constant = n->constant;
        for (auto& [c, t] : n->terms) s.terms.emplace_back(c, build(t));
        break;
      case ExprNode::Kind::Apply:
        s.fn = &reg.at(n->fn.name);
        s.ref = n->fn;
        if (s.ref.deriv_arg >= 0 && !s.fn->has_partial(s.ref.deriv_arg))
          throw MissingDerivative(s.ref.name);
        for (auto& a : n->args) s.args.push_back(build(a));
        break;
    }
    int id = static_cast<int>(steps_.size());
    steps_.push_back(std::move(s));
    index.emplace(n.get(), id);
    return id;
  };
  build(e);
}

double CompiledExpr::eval(std::span<const double> leaf_values) const {
  thread_local std::vector<double> vals;
  thread_local std::vector<double> argbuf;
  vals.resize(steps_.size());
  double out = 0.0;
  for (size_t i = 0; i < steps_.size(); ++i) {
    const Step& s = steps_[i];
    switch (s.kind) {
      case ExprNode::Kind::Leaf:
        out = leaf_values[static_cast<size_t>(s.leaf_slot)];
        break;
      case ExprNode::Kind::Affine:
        out = s.constant;
        for (auto& [c, j] : s.terms) out += c * vals[static_cast<size_t>(j)];
        break;
      case ExprNode::Kind::Apply:
        argbuf.resize(s.args.size());
        for (size_t j = 0; j < s.args.size(); ++j)
          argbuf[j] = vals[static_cast<size_t>(s.args[j])];
        out = s.ref.deriv_arg >= 0
                  ? s.fn->partial(s.ref.deriv_arg, argbuf, s.ref.params)
                  : s.fn->forward(argbuf, s.ref.params);
        break;
    }
    vals[i] = out;
  }
  return out;
}

}  // namespace tp
