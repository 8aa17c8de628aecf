#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

// Straightline tensor-program IR: typed lines over vector (G/H) and matrix
// (A) variables.  Lines are numbered from 1; a variable is identified with
// the line that produces it.

namespace tp {

enum class VarKind { G, H, A };
enum class SyntaxMode { Original, Extended };

// Reference to a registered nonlinearity, optionally differentiated once
// with respect to one argument (deriv_arg >= 0).
struct NonlinRef {
  std::string name;
  std::vector<double> params;
  int deriv_arg = -1;

  bool operator==(const NonlinRef&) const = default;
};

struct VecInLine {
  std::optional<std::string> cdc_hint;
  bool operator==(const VecInLine&) const = default;
};
struct MatInLine {
  std::string rows_hint;
  std::string cols_hint;
  bool operator==(const MatInLine&) const = default;
};
struct TransposeLine {
  int source = 0;  // line of the A-var being transposed
  bool operator==(const TransposeLine&) const = default;
};
struct MatMulLine {
  int matrix = 0;  // A-var line
  int vec = 0;     // G- or H-var line
  bool operator==(const MatMulLine&) const = default;
};
struct LinCombTerm {
  double coeff = 1.0;
  int var = 0;  // G-var line
  bool operator==(const LinCombTerm&) const = default;
};
struct LinCombLine {
  std::vector<LinCombTerm> terms;
  bool operator==(const LinCombLine&) const = default;
};
struct NonlinLine {
  NonlinRef fn;
  std::vector<int> args;  // G-var lines
  bool operator==(const NonlinLine&) const = default;
};
// Extended syntax: nonlinearity over previous G- or H-vars.  fn.name ==
// "affine" encodes a linear combination with coefficients in fn.params.
struct CompLine {
  NonlinRef fn;
  std::vector<int> args;
  bool operator==(const CompLine&) const = default;
};

using LineBody = std::variant<VecInLine, MatInLine, TransposeLine, MatMulLine,
                              LinCombLine, NonlinLine, CompLine>;

struct Line {
  std::string name;
  LineBody body;
  bool operator==(const Line&) const = default;
};

struct Skeleton {
  SyntaxMode syntax = SyntaxMode::Original;
  std::vector<Line> lines;  // lines[i] is line i+1

  int size() const { return static_cast<int>(lines.size()); }
  const Line& line(int l) const { return lines.at(static_cast<size_t>(l) - 1); }
  VarKind kind(int l) const;
  bool is_vec(int l) const { return kind(l) != VarKind::A; }
  // Line number for a name, or 0 when absent.
  int by_name(const std::string& name) const;
  int add(std::string name, LineBody body);  // returns the new line number

  bool operator==(const Skeleton&) const = default;
};

// The set Lambda of user-declared equal-dimension constraints (G-var pairs).
struct DimConstraints {
  std::vector<std::pair<int, int>> pairs;
  bool operator==(const DimConstraints&) const = default;
};

struct Diagnostic {
  int line = 0;
  std::string message;
};

// Sampling data: sigma per input A-var, mean/covariance per input G-var,
// and per-class-label width scales (limit ratios alpha are quotients of
// scales) plus concrete simulation widths.
struct SamplingSpec {
  std::map<int, double> sigma;                  // A-var line -> sigma
  std::map<int, double> mean;                   // input G line -> mu (default 0)
  std::map<std::pair<int, int>, double> cov;    // sorted input pair -> cov
  std::map<std::string, double> scale;          // class label -> width scale
  std::map<std::string, long> width;            // class label -> width

  double sigma_of(int a_line) const;            // default 1
  double mean_of(int g_line) const;             // default 0
  double cov_of(int g1, int g2) const;          // default: 1 on diagonal, else 0
  void set_cov(int g1, int g2, double v);
  double scale_of(const std::string& label) const;  // default 1
};

struct ParseError : std::runtime_error {
  int line;
  int column;
  ParseError(int line_, int col_, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line_) + ":" +
                           std::to_string(col_) + ": " + msg),
        line(line_),
        column(col_) {}
};

struct ParsedProgram {
  Skeleton sk;
  DimConstraints lam;
  SamplingSpec spec;
};

ParsedProgram parse_program(const std::string& text);  // throws ParseError
std::string render_program(const Skeleton& sk, const DimConstraints& lam = {},
                           const SamplingSpec& spec = {});

// Structural checks plus dimension-constraint satisfiability (distinct class
// labels forced into one dimension class).  Empty result means valid.
std::vector<Diagnostic> validate(const Skeleton& sk,
                                 const DimConstraints& lam = {});

}  // namespace tp
