#pragma once

// Coefficient-field expressions: a small infix language over x1..xn and t
// with exact symbolic differentiation.
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := '-' unary | power
//   power   := primary ('^' ['-'] integer | '^' '(' ['-'] integer ')')?
//   primary := number | 'pi' | x<k> | 't' | func '(' expr ')' | '(' expr ')'
//   func    := sin | cos | exp | log | tanh

#include "stochlag/types.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stochlag {

struct SourceSpan {
  std::size_t byte_start = 0;
  std::size_t byte_end = 0;
};

class SyntaxError : public Error {
 public:
  SyntaxError(const std::string& what, SourceSpan span)
      : Error(what), span_(span) {}
  SourceSpan span() const { return span_; }

 private:
  SourceSpan span_;
};

class UnknownVariable : public Error {
 public:
  UnknownVariable(const std::string& what, SourceSpan span)
      : Error(what), span_(span) {}
  SourceSpan span() const { return span_; }

 private:
  SourceSpan span_;
};

enum class Op : std::uint8_t {
  Constant,
  Variable,
  Time,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Pow,
  Sin,
  Cos,
  Exp,
  Log,
  Tanh,
};

/// Differentiation target: a spatial coordinate x_{index+1} or time.
struct Variable {
  static constexpr int kTime = -1;
  int index = kTime;

  static Variable space(int k) { return Variable{k}; }
  static Variable time() { return Variable{kTime}; }
  bool is_time() const { return index == kTime; }
};

/// Immutable expression tree. Copies share structure; safe to evaluate
/// concurrently from any number of threads.
class FieldExpr {
 public:
  struct Node {
    Op op = Op::Constant;
    double value = 0.0;  // Constant
    int index = 0;       // Variable: coordinate index; Pow: exponent
    std::shared_ptr<const Node> lhs;
    std::shared_ptr<const Node> rhs;
  };
  using NodePtr = std::shared_ptr<const Node>;

  FieldExpr() = default;

  /// Parses `source` over variables x1..x`dimension` and t.
  static FieldExpr parse(std::string_view source, int dimension);

  static FieldExpr constant(double c, int dimension);
  static FieldExpr variable(int index, int dimension);
  static FieldExpr time(int dimension);

  int dimension() const { return dimension_; }
  const Node& root() const { return *root_; }
  bool valid() const { return static_cast<bool>(root_); }

  /// Exact symbolic derivative. Constants fold, so derivatives of constants
  /// are the constant 0.
  FieldExpr differentiate(Variable var) const;

  /// Tree-walking evaluation. Throws DomainError for log of a non-positive
  /// argument, division by zero, or a non-finite result.
  double evaluate(std::span<const double> x, double t) const;
  double evaluate(const Vec& x, double t) const {
    return evaluate(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())), t);
  }

  /// Re-parsable text with minimal parentheses.
  std::string to_string() const;

  bool structurally_equal(const FieldExpr& other) const;
  bool depends_on_space() const;
  bool depends_on_time() const;
  std::optional<double> constant_value() const;
  std::size_t node_count() const;

  // Folding constructors (constant folding plus x+0, x*1, x*0 identities).
  friend FieldExpr operator+(const FieldExpr& a, const FieldExpr& b);
  friend FieldExpr operator-(const FieldExpr& a, const FieldExpr& b);
  friend FieldExpr operator*(const FieldExpr& a, const FieldExpr& b);
  friend FieldExpr operator/(const FieldExpr& a, const FieldExpr& b);
  friend FieldExpr operator-(const FieldExpr& a);
  friend FieldExpr operator*(double c, const FieldExpr& a);
  friend FieldExpr pow(const FieldExpr& a, int exponent);
  friend FieldExpr sin(const FieldExpr& a);
  friend FieldExpr cos(const FieldExpr& a);
  friend FieldExpr exp(const FieldExpr& a);
  friend FieldExpr log(const FieldExpr& a);
  friend FieldExpr tanh(const FieldExpr& a);

  /// Raw (non-folding) construction, used by the parser and tests that need
  /// a tree to mirror its source exactly.
  static FieldExpr make_raw(NodePtr root, int dimension);

 private:
  FieldExpr(NodePtr root, int dimension) : root_(std::move(root)), dimension_(dimension) {}

  NodePtr root_;
  int dimension_ = 0;
};

/// Flat postfix program compiled from a FieldExpr. Produces bit-identical
/// results to FieldExpr::evaluate at a fraction of the cost; used on the
/// path-integration hot loop.
class CompiledField {
 public:
  CompiledField() = default;
  explicit CompiledField(const FieldExpr& expr);

  double operator()(const double* x, double t) const;
  double operator()(const Vec& x, double t) const { return (*this)(x.data(), t); }

  bool is_constant() const { return constant_.has_value(); }
  std::optional<double> constant_value() const { return constant_; }

 private:
  struct Instr {
    Op op;
    int index;
    double value;
  };
  std::vector<Instr> code_;
  std::optional<double> constant_;
  int max_stack_ = 0;
};

namespace detail {
/// Integer power by repeated squaring, shared by both evaluation routes.
double integer_power(double base, int exponent);
}  // namespace detail

}  // namespace stochlag
