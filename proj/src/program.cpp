#include "tp/program.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <sstream>

namespace tp {

VarKind Skeleton::kind(int l) const {
  const LineBody& b = line(l).body;
  if (std::holds_alternative<VecInLine>(b) ||
      std::holds_alternative<MatMulLine>(b) ||
      std::holds_alternative<LinCombLine>(b))
    return VarKind::G;
  if (std::holds_alternative<MatInLine>(b) ||
      std::holds_alternative<TransposeLine>(b))
    return VarKind::A;
  return VarKind::H;
}

int Skeleton::by_name(const std::string& name) const {
  for (int l = 1; l <= size(); ++l)
    if (lines[static_cast<size_t>(l) - 1].name == name) return l;
  return 0;
}

int Skeleton::add(std::string name, LineBody body) {
  lines.push_back(Line{std::move(name), std::move(body)});
  return size();
}

double SamplingSpec::sigma_of(int a_line) const {
  auto it = sigma.find(a_line);
  return it == sigma.end() ? 1.0 : it->second;
}

double SamplingSpec::mean_of(int g_line) const {
  auto it = mean.find(g_line);
  return it == mean.end() ? 0.0 : it->second;
}

double SamplingSpec::cov_of(int g1, int g2) const {
  if (g1 > g2) std::swap(g1, g2);
  auto it = cov.find({g1, g2});
  if (it != cov.end()) return it->second;
  return g1 == g2 ? 1.0 : 0.0;
}

void SamplingSpec::set_cov(int g1, int g2, double v) {
  if (g1 > g2) std::swap(g1, g2);
  cov[{g1, g2}] = v;
}

double SamplingSpec::scale_of(const std::string& label) const {
  auto it = scale.find(label);
  return it == scale.end() ? 1.0 : it->second;
}

namespace {

struct Token {
  enum class Type { Ident, Num, Sym, End };
  Type type = Type::End;
  std::string text;
  double num = 0.0;
  int col = 0;
};

class Lexer {
 public:
  Lexer(const std::string& s, int line_no) : s_(s), line_no_(line_no) { advance(); }

  const Token& peek() const { return tok_; }
  Token take() {
    Token t = tok_;
    advance();
    return t;
  }
  bool at_end() const { return tok_.type == Token::Type::End; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(line_no_, tok_.col, msg);
  }

  Token expect_ident(const std::string& what) {
    if (tok_.type != Token::Type::Ident) fail("expected " + what);
    return take();
  }
  double expect_num(const std::string& what) {
    bool neg = false;
    while (tok_.type == Token::Type::Sym && tok_.text == "-") {
      neg = !neg;
      take();
    }
    if (tok_.type != Token::Type::Num) fail("expected " + what);
    double v = take().num;
    return neg ? -v : v;
  }
  void expect_sym(const std::string& s) {
    if (tok_.type != Token::Type::Sym || tok_.text != s)
      fail("expected '" + s + "'");
    take();
  }
  bool accept_sym(const std::string& s) {
    if (tok_.type == Token::Type::Sym && tok_.text == s) {
      take();
      return true;
    }
    return false;
  }

 private:
  void advance() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    tok_ = Token{};
    tok_.col = static_cast<int>(pos_) + 1;
    if (pos_ >= s_.size() || s_[pos_] == '#') {
      tok_.type = Token::Type::End;
      return;
    }
    char c = s_[pos_];
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      size_t j = pos_;
      while (j < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[j])) || s_[j] == '_')) ++j;
      tok_.type = Token::Type::Ident;
      tok_.text = s_.substr(pos_, j - pos_);
      pos_ = j;
      return;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) ||
        (c == '.' && pos_ + 1 < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_ + 1])))) {
      size_t j = pos_;
      while (j < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[j])) || s_[j] == '.' ||
                               s_[j] == 'e' || s_[j] == 'E' ||
                               ((s_[j] == '+' || s_[j] == '-') && j > pos_ &&
                                (s_[j - 1] == 'e' || s_[j - 1] == 'E'))))
        ++j;
      tok_.type = Token::Type::Num;
      tok_.text = s_.substr(pos_, j - pos_);
      tok_.num = std::stod(tok_.text);
      pos_ = j;
      return;
    }
    tok_.type = Token::Type::Sym;
    tok_.text = std::string(1, c);
    ++pos_;
  }

  const std::string& s_;
  int line_no_;
  size_t pos_ = 0;
  Token tok_;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ParsedProgram parse_program(const std::string& text) {
  ParsedProgram out;
  Skeleton& sk = out.sk;
  bool syntax_declared = false;

  std::istringstream in(text);
  std::string raw;
  int line_no = 0;

  auto resolve = [&](Lexer& lx, const std::string& name, int col) -> int {
    int l = sk.by_name(name);
    if (l == 0) throw ParseError(line_no, col, "undeclared var '" + name + "'");
    (void)lx;
    return l;
  };
  auto declare = [&](Lexer& lx, const Token& name) {
    if (sk.by_name(name.text) != 0)
      throw ParseError(line_no, name.col, "duplicate name '" + name.text + "'");
    (void)lx;
  };

  while (std::getline(in, raw)) {
    ++line_no;
    Lexer lx(raw, line_no);
    if (lx.at_end()) continue;
    Token head = lx.take();
    if (head.type != Token::Type::Ident) lx.fail("expected statement");

    if (head.text == "syntax") {
      Token mode = lx.expect_ident("syntax mode");
      if (mode.text == "original")
        sk.syntax = SyntaxMode::Original;
      else if (mode.text == "extended")
        sk.syntax = SyntaxMode::Extended;
      else
        lx.fail("unknown syntax mode '" + mode.text + "'");
      syntax_declared = true;
      continue;
    }

    if (head.text == "input") {
      Token kind = lx.expect_ident("'vec' or 'mat'");
      Token name = lx.expect_ident("name");
      declare(lx, name);
      if (kind.text == "vec") {
        VecInLine v;
        if (lx.accept_sym(":")) v.cdc_hint = lx.expect_ident("class label").text;
        sk.add(name.text, v);
      } else if (kind.text == "mat") {
        lx.expect_sym(":");
        Token rows = lx.expect_ident("rows label");
        Token x = lx.expect_ident("'x'");
        if (x.text != "x") lx.fail("expected 'x' between labels");
        Token cols = lx.expect_ident("cols label");
        sk.add(name.text, MatInLine{rows.text, cols.text});
      } else {
        lx.fail("expected 'vec' or 'mat'");
      }
      continue;
    }

    if (head.text == "trans") {
      Token name = lx.expect_ident("name");
      declare(lx, name);
      lx.expect_sym("=");
      Token src = lx.expect_ident("source var");
      sk.add(name.text, TransposeLine{resolve(lx, src.text, src.col)});
      continue;
    }

    if (head.text == "constrain") {
      auto dim_ref = [&]() -> int {
        Token d = lx.expect_ident("'dim'");
        if (d.text != "dim") lx.fail("expected 'dim'");
        lx.expect_sym("(");
        Token v = lx.expect_ident("var");
        lx.expect_sym(")");
        return resolve(lx, v.text, v.col);
      };
      int a = dim_ref();
      lx.expect_sym("=");
      int b = dim_ref();
      out.lam.pairs.emplace_back(a, b);
      continue;
    }

    if (head.text == "sample") {
      if (lx.peek().type == Token::Type::Ident && lx.peek().text == "cov") {
        lx.take();
        lx.expect_sym("(");
        Token a = lx.expect_ident("var");
        lx.expect_sym(",");
        Token b = lx.expect_ident("var");
        lx.expect_sym(")");
        lx.expect_sym("=");
        out.spec.set_cov(resolve(lx, a.text, a.col), resolve(lx, b.text, b.col),
                         lx.expect_num("value"));
        continue;
      }
      Token name = lx.expect_ident("var");
      int l = resolve(lx, name.text, name.col);
      while (!lx.at_end()) {
        Token field = lx.expect_ident("field");
        lx.expect_sym("=");
        double v = lx.expect_num("value");
        if (field.text == "sigma")
          out.spec.sigma[l] = v;
        else if (field.text == "mean")
          out.spec.mean[l] = v;
        else if (field.text == "var")
          out.spec.set_cov(l, l, v);
        else
          lx.fail("unknown sample field '" + field.text + "'");
      }
      continue;
    }

    if (head.text == "scale" || head.text == "width") {
      Token label = lx.expect_ident("class label");
      lx.expect_sym("=");
      double v = lx.expect_num("value");
      if (head.text == "scale")
        out.spec.scale[label.text] = v;
      else
        out.spec.width[label.text] = static_cast<long>(v);
      continue;
    }

    // Assignment line: NAME = RHS
    declare(lx, head);
    lx.expect_sym("=");

    std::vector<std::pair<double, int>> terms;
    bool is_lincomb = true;

    if (lx.peek().type == Token::Type::Ident) {
      Token first = lx.take();
      if (lx.peek().type == Token::Type::Sym &&
          (lx.peek().text == "(" || lx.peek().text == "{")) {
        // Function application: fn{params}(args)
        NonlinRef fn;
        fn.name = first.text;
        if (lx.accept_sym("{")) {
          while (true) {
            fn.params.push_back(lx.expect_num("parameter"));
            if (lx.accept_sym("}")) break;
            lx.expect_sym(",");
          }
        }
        lx.expect_sym("(");
        std::vector<int> args;
        while (true) {
          Token v = lx.expect_ident("argument");
          args.push_back(resolve(lx, v.text, v.col));
          if (lx.accept_sym(")")) break;
          lx.expect_sym(",");
        }
        if (!lx.at_end()) lx.fail("trailing tokens");
        bool all_g = true;
        for (int a : args) {
          if (sk.kind(a) == VarKind::A) lx.fail("matrix var as function argument");
          all_g = all_g && sk.kind(a) == VarKind::G;
        }
        if (all_g) {
          sk.add(head.text, NonlinLine{fn, args});
        } else {
          if (sk.syntax != SyntaxMode::Extended)
            lx.fail("H-var arguments require extended syntax");
          sk.add(head.text, CompLine{fn, args});
        }
        continue;
      }
      int fl = resolve(lx, first.text, first.col);
      if (sk.kind(fl) == VarKind::A) {
        lx.expect_sym("*");
        Token v = lx.expect_ident("vector var");
        int vl = resolve(lx, v.text, v.col);
        if (!sk.is_vec(vl)) lx.fail("matmul argument must be a vector var");
        if (!lx.at_end()) lx.fail("trailing tokens");
        sk.add(head.text, MatMulLine{fl, vl});
        continue;
      }
      terms.emplace_back(1.0, fl);
    }

    // Linear combination: remaining (or all) signed terms.
    if (is_lincomb) {
      bool first_term = terms.empty();
      while (!lx.at_end()) {
        double sign = 1.0;
        if (!first_term) {
          if (lx.accept_sym("+"))
            sign = 1.0;
          else if (lx.accept_sym("-"))
            sign = -1.0;
          else
            lx.fail("expected '+' or '-'");
        }
        while (lx.accept_sym("-")) sign = -sign;
        first_term = false;
        double coeff = 1.0;
        if (lx.peek().type == Token::Type::Num) {
          coeff = lx.take().num;
          lx.expect_sym("*");
        }
        Token v = lx.expect_ident("var");
        terms.emplace_back(sign * coeff, resolve(lx, v.text, v.col));
      }
      if (terms.empty()) lx.fail("empty right-hand side");
      bool all_g = true;
      for (auto& [c, v] : terms) {
        if (sk.kind(v) == VarKind::A) lx.fail("matrix var in linear combination");
        all_g = all_g && sk.kind(v) == VarKind::G;
      }
      if (all_g) {
        LinCombLine lc;
        for (auto& [c, v] : terms) lc.terms.push_back({c, v});
        sk.add(head.text, lc);
      } else {
        if (sk.syntax != SyntaxMode::Extended)
          lx.fail("H-var in linear combination requires extended syntax");
        CompLine cp;
        cp.fn.name = "affine";
        for (auto& [c, v] : terms) {
          cp.fn.params.push_back(c);
          cp.args.push_back(v);
        }
        sk.add(head.text, cp);
      }
    }
  }

  if (sk.lines.empty()) throw ParseError(line_no, 1, "empty program");
  (void)syntax_declared;
  return out;
}

namespace {

std::string render_fn_call(const Skeleton& sk, const NonlinRef& fn,
                           const std::vector<int>& args) {
  std::string s = fn.name;
  if (!fn.params.empty()) {
    s += "{";
    for (size_t i = 0; i < fn.params.size(); ++i) {
      if (i) s += ",";
      s += fmt(fn.params[i]);
    }
    s += "}";
  }
  s += "(";
  for (size_t i = 0; i < args.size(); ++i) {
    if (i) s += ", ";
    s += sk.line(args[i]).name;
  }
  s += ")";
  return s;
}

}  // namespace

std::string render_program(const Skeleton& sk, const DimConstraints& lam,
                           const SamplingSpec& spec) {
  std::ostringstream os;
  os << "syntax "
     << (sk.syntax == SyntaxMode::Extended ? "extended" : "original") << "\n";
  for (int l = 1; l <= sk.size(); ++l) {
    const Line& ln = sk.line(l);
    os << std::visit(
        [&](const auto& b) -> std::string {
          using T = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<T, VecInLine>) {
            std::string s = "input vec " + ln.name;
            if (b.cdc_hint) s += " : " + *b.cdc_hint;
            return s;
          } else if constexpr (std::is_same_v<T, MatInLine>) {
            return "input mat " + ln.name + " : " + b.rows_hint + " x " +
                   b.cols_hint;
          } else if constexpr (std::is_same_v<T, TransposeLine>) {
            return "trans " + ln.name + " = " + sk.line(b.source).name;
          } else if constexpr (std::is_same_v<T, MatMulLine>) {
            return ln.name + " = " + sk.line(b.matrix).name + " * " +
                   sk.line(b.vec).name;
          } else if constexpr (std::is_same_v<T, LinCombLine>) {
            std::string s = ln.name + " = ";
            for (size_t i = 0; i < b.terms.size(); ++i) {
              if (i) s += " + ";
              s += fmt(b.terms[i].coeff) + "*" + sk.line(b.terms[i].var).name;
            }
            return s;
          } else if constexpr (std::is_same_v<T, NonlinLine>) {
            return ln.name + " = " + render_fn_call(sk, b.fn, b.args);
          } else {  // CompLine
            if (b.fn.name == "affine" && b.fn.params.size() == b.args.size()) {
              std::string s = ln.name + " = ";
              for (size_t i = 0; i < b.args.size(); ++i) {
                if (i) s += " + ";
                s += fmt(b.fn.params[i]) + "*" + sk.line(b.args[i]).name;
              }
              return s;
            }
            return ln.name + " = " + render_fn_call(sk, b.fn, b.args);
          }
        },
        ln.body);
    os << "\n";
  }
  for (const auto& [a, b] : lam.pairs)
    os << "constrain dim(" << sk.line(a).name << ") = dim(" << sk.line(b).name
       << ")\n";
  for (const auto& [l, s] : spec.sigma)
    os << "sample " << sk.line(l).name << " sigma = " << fmt(s) << "\n";
  for (const auto& [l, m] : spec.mean)
    os << "sample " << sk.line(l).name << " mean = " << fmt(m) << "\n";
  for (const auto& [pr, v] : spec.cov) {
    if (pr.first == pr.second)
      os << "sample " << sk.line(pr.first).name << " var = " << fmt(v) << "\n";
    else
      os << "sample cov(" << sk.line(pr.first).name << ", "
         << sk.line(pr.second).name << ") = " << fmt(v) << "\n";
  }
  for (const auto& [label, v] : spec.scale)
    os << "scale " << label << " = " << fmt(v) << "\n";
  for (const auto& [label, v] : spec.width)
    os << "width " << label << " = " << v << "\n";
  return os.str();
}

}  // namespace tp
