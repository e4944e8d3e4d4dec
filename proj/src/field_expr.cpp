#include "stochlag/field_expr.hpp"

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>

namespace stochlag {

namespace detail {

double integer_power(double base, int exponent) {
  if (exponent < 0) {
    if (base == 0.0) throw DomainError("zero raised to a negative power");
    return 1.0 / integer_power(base, -exponent);
  }
  double result = 1.0;
  double factor = base;
  unsigned e = static_cast<unsigned>(exponent);
  while (e != 0) {
    if (e & 1u) result *= factor;
    e >>= 1u;
    if (e != 0) factor *= factor;
  }
  return result;
}

}  // namespace detail

namespace {

using Node = FieldExpr::Node;
using NodePtr = FieldExpr::NodePtr;

NodePtr make_node(Op op, double value = 0.0, int index = 0, NodePtr lhs = nullptr,
                  NodePtr rhs = nullptr) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->value = value;
  node->index = index;
  node->lhs = std::move(lhs);
  node->rhs = std::move(rhs);
  return node;
}

double apply_unary(Op op, double a) {
  switch (op) {
    case Op::Neg:
      return -a;
    case Op::Sin:
      return std::sin(a);
    case Op::Cos:
      return std::cos(a);
    case Op::Exp:
      return std::exp(a);
    case Op::Log:
      if (!(a > 0.0)) throw DomainError("log of non-positive argument");
      return std::log(a);
    case Op::Tanh:
      return std::tanh(a);
    default:
      throw Error("not a unary operator");
  }
}

double apply_binary(Op op, double a, double b) {
  switch (op) {
    case Op::Add:
      return a + b;
    case Op::Sub:
      return a - b;
    case Op::Mul:
      return a * b;
    case Op::Div:
      if (b == 0.0) throw DomainError("division by zero");
      return a / b;
    default:
      throw Error("not a binary operator");
  }
}

bool is_binary(Op op) {
  return op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div;
}

bool is_unary(Op op) {
  return op == Op::Neg || op == Op::Sin || op == Op::Cos || op == Op::Exp ||
         op == Op::Log || op == Op::Tanh;
}

double eval_node(const Node& n, std::span<const double> x, double t) {
  switch (n.op) {
    case Op::Constant:
      return n.value;
    case Op::Variable:
      return x[static_cast<std::size_t>(n.index)];
    case Op::Time:
      return t;
    case Op::Pow:
      return detail::integer_power(eval_node(*n.lhs, x, t), n.index);
    default:
      break;
  }
  if (is_unary(n.op)) return apply_unary(n.op, eval_node(*n.lhs, x, t));
  const double a = eval_node(*n.lhs, x, t);
  const double b = eval_node(*n.rhs, x, t);
  return apply_binary(n.op, a, b);
}

bool const_is(const NodePtr& n, double v) { return n->op == Op::Constant && n->value == v; }

// ---------------------------------------------------------------- parser

class Parser {
 public:
  Parser(std::string_view src, int dim) : src_(src), dim_(dim) {}

  NodePtr parse_all() {
    skip_ws();
    if (pos_ >= src_.size()) throw SyntaxError("empty expression", {0, src_.size()});
    NodePtr e = parse_expr();
    skip_ws();
    if (pos_ != src_.size()) {
      throw SyntaxError("unexpected trailing input '" + std::string(src_.substr(pos_)) + "'",
                        {pos_, src_.size()});
    }
    return e;
  }

 private:
  void skip_ws() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip_ws();
    if (pos_ < src_.size() && src_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!accept(c)) {
      throw SyntaxError(std::string("expected '") + c + "'", {pos_, std::min(pos_ + 1, src_.size())});
    }
  }

  NodePtr parse_expr() {
    NodePtr lhs = parse_term();
    for (;;) {
      if (accept('+')) {
        lhs = make_node(Op::Add, 0, 0, lhs, parse_term());
      } else if (accept('-')) {
        lhs = make_node(Op::Sub, 0, 0, lhs, parse_term());
      } else {
        return lhs;
      }
    }
  }

  NodePtr parse_term() {
    NodePtr lhs = parse_unary();
    for (;;) {
      if (accept('*')) {
        lhs = make_node(Op::Mul, 0, 0, lhs, parse_unary());
      } else if (accept('/')) {
        lhs = make_node(Op::Div, 0, 0, lhs, parse_unary());
      } else {
        return lhs;
      }
    }
  }

  NodePtr parse_unary() {
    if (accept('-')) {
      NodePtr operand = parse_unary();
      // A negated literal is a negative constant so printed constants round-trip.
      if (operand->op == Op::Constant) return make_node(Op::Constant, -operand->value);
      return make_node(Op::Neg, 0, 0, operand);
    }
    return parse_power();
  }

  NodePtr parse_power() {
    NodePtr base = parse_primary();
    if (!accept('^')) return base;
    skip_ws();
    const std::size_t start = pos_;
    const bool paren = accept('(');
    const bool negative = accept('-');
    skip_ws();
    const std::size_t digits = pos_;
    while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    if (digits == pos_) {
      throw SyntaxError("exponent must be an integer literal", {start, std::max(pos_, start + 1)});
    }
    int exponent = 0;
    auto [ptr, ec] = std::from_chars(src_.data() + digits, src_.data() + pos_, exponent);
    if (ec != std::errc() || exponent > 64) {
      throw SyntaxError("exponent out of range", {digits, pos_});
    }
    if (paren) expect(')');
    return make_node(Op::Pow, 0, negative ? -exponent : exponent, base);
  }

  NodePtr parse_primary() {
    skip_ws();
    if (pos_ >= src_.size()) throw SyntaxError("unexpected end of input", {pos_, pos_});
    const char c = src_[pos_];
    if (c == '(') {
      ++pos_;
      NodePtr e = parse_expr();
      expect(')');
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_identifier();
    throw SyntaxError(std::string("unexpected character '") + c + "'", {pos_, pos_ + 1});
  }

  NodePtr parse_number() {
    const std::size_t start = pos_;
    while (pos_ < src_.size() && (std::isdigit(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '.')) ++pos_;
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      std::size_t p = pos_ + 1;
      if (p < src_.size() && (src_[p] == '+' || src_[p] == '-')) ++p;
      if (p < src_.size() && std::isdigit(static_cast<unsigned char>(src_[p]))) {
        pos_ = p;
        while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
      }
    }
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(src_.data() + start, src_.data() + pos_, value);
    if (ec != std::errc() || ptr != src_.data() + pos_ || !std::isfinite(value)) {
      throw SyntaxError("malformed number '" + std::string(src_.substr(start, pos_ - start)) + "'",
                        {start, pos_});
    }
    return make_node(Op::Constant, value);
  }

  NodePtr parse_identifier() {
    const std::size_t start = pos_;
    while (pos_ < src_.size() &&
           (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) {
      ++pos_;
    }
    const std::string_view name = src_.substr(start, pos_ - start);
    const SourceSpan span{start, pos_};

    static constexpr std::array<std::pair<std::string_view, Op>, 5> kFunctions{{
        {"sin", Op::Sin}, {"cos", Op::Cos}, {"exp", Op::Exp}, {"log", Op::Log}, {"tanh", Op::Tanh}}};
    for (const auto& [fname, op] : kFunctions) {
      if (name == fname) {
        expect('(');
        NodePtr arg = parse_expr();
        expect(')');
        return make_node(op, 0, 0, arg);
      }
    }
    if (name == "t") return make_node(Op::Time);
    if (name == "pi") return make_node(Op::Constant, std::numbers::pi);
    if (name.size() >= 2 && name[0] == 'x') {
      int k = 0;
      auto [ptr, ec] = std::from_chars(name.data() + 1, name.data() + name.size(), k);
      if (ec == std::errc() && ptr == name.data() + name.size() && name[1] != '0') {
        if (k >= 1 && k <= dim_) return make_node(Op::Variable, 0, k - 1);
        throw UnknownVariable("variable '" + std::string(name) + "' outside x1..x" +
                                  std::to_string(dim_) + " at byte " + std::to_string(start),
                              span);
      }
    }
    throw UnknownVariable("unknown identifier '" + std::string(name) + "' at byte " +
                              std::to_string(start),
                          span);
  }

  std::string_view src_;
  int dim_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------- printer

constexpr int kPrecAdd = 1;
constexpr int kPrecMul = 2;
constexpr int kPrecUnary = 3;
constexpr int kPrecPow = 4;
constexpr int kPrecAtom = 5;

int precedence(const Node& n) {
  switch (n.op) {
    case Op::Constant:
      return std::signbit(n.value) ? kPrecUnary : kPrecAtom;
    case Op::Add:
    case Op::Sub:
      return kPrecAdd;
    case Op::Mul:
    case Op::Div:
      return kPrecMul;
    case Op::Neg:
      return kPrecUnary;
    case Op::Pow:
      return kPrecPow;
    default:
      return kPrecAtom;
  }
}

std::string format_number(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), std::fabs(v));
  std::string s(buf.data(), ptr);
  return std::signbit(v) ? "-" + s : s;
}

void print_node(const Node& n, int min_prec, std::string& out) {
  const int prec = precedence(n);
  const bool paren = prec < min_prec;
  if (paren) out += '(';
  switch (n.op) {
    case Op::Constant:
      out += format_number(n.value);
      break;
    case Op::Variable:
      out += 'x';
      out += std::to_string(n.index + 1);
      break;
    case Op::Time:
      out += 't';
      break;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      print_node(*n.lhs, prec, out);
      const char* sym = n.op == Op::Add ? " + " : n.op == Op::Sub ? " - " : n.op == Op::Mul ? " * " : " / ";
      out += sym;
      print_node(*n.rhs, prec + 1, out);
      break;
    }
    case Op::Neg:
      out += '-';
      print_node(*n.lhs, kPrecUnary, out);
      break;
    case Op::Pow:
      print_node(*n.lhs, kPrecAtom, out);
      out += '^';
      if (n.index < 0) {
        out += "(" + std::to_string(n.index) + ")";
      } else {
        out += std::to_string(n.index);
      }
      break;
    case Op::Sin:
    case Op::Cos:
    case Op::Exp:
    case Op::Log:
    case Op::Tanh: {
      static constexpr std::array<const char*, 5> kNames{"sin", "cos", "exp", "log", "tanh"};
      out += kNames[static_cast<std::size_t>(n.op) - static_cast<std::size_t>(Op::Sin)];
      out += '(';
      print_node(*n.lhs, 0, out);
      out += ')';
      break;
    }
  }
  if (paren) out += ')';
}

bool equal_nodes(const Node& a, const Node& b) {
  if (&a == &b) return true;
  if (a.op != b.op) return false;
  switch (a.op) {
    case Op::Constant:
      return a.value == b.value && std::signbit(a.value) == std::signbit(b.value);
    case Op::Variable:
    case Op::Pow:
      if (a.index != b.index) return false;
      break;
    default:
      break;
  }
  if (a.lhs && !equal_nodes(*a.lhs, *b.lhs)) return false;
  if (a.rhs && !equal_nodes(*a.rhs, *b.rhs)) return false;
  return true;
}

bool any_node(const Node& n, const std::function<bool(const Node&)>& pred) {
  if (pred(n)) return true;
  if (n.lhs && any_node(*n.lhs, pred)) return true;
  if (n.rhs && any_node(*n.rhs, pred)) return true;
  return false;
}

std::size_t count_nodes(const Node& n) {
  return 1 + (n.lhs ? count_nodes(*n.lhs) : 0) + (n.rhs ? count_nodes(*n.rhs) : 0);
}

std::optional<double> try_fold(const std::function<double()>& f) {
  try {
    const double v = f();
    if (std::isfinite(v)) return v;
  } catch (const DomainError&) {
  }
  return std::nullopt;
}

}  // namespace

// ---------------------------------------------------------------- FieldExpr

FieldExpr FieldExpr::parse(std::string_view source, int dimension) {
  if (dimension < 1 || dimension > kMaxDim) {
    throw DimensionMismatch("expression dimension must be in 1..3, got " + std::to_string(dimension));
  }
  Parser parser(source, dimension);
  return FieldExpr(parser.parse_all(), dimension);
}

FieldExpr FieldExpr::constant(double c, int dimension) {
  return FieldExpr(make_node(Op::Constant, c), dimension);
}

FieldExpr FieldExpr::variable(int index, int dimension) {
  if (index < 0 || index >= dimension) throw DimensionMismatch("variable index out of range");
  return FieldExpr(make_node(Op::Variable, 0, index), dimension);
}

FieldExpr FieldExpr::time(int dimension) { return FieldExpr(make_node(Op::Time), dimension); }

FieldExpr FieldExpr::make_raw(NodePtr root, int dimension) { return FieldExpr(std::move(root), dimension); }

double FieldExpr::evaluate(std::span<const double> x, double t) const {
  if (static_cast<int>(x.size()) != dimension_) {
    throw DimensionMismatch("point has dimension " + std::to_string(x.size()) + ", expression expects " +
                            std::to_string(dimension_));
  }
  const double v = eval_node(*root_, x, t);
  if (!std::isfinite(v)) throw DomainError("non-finite value of '" + to_string() + "'");
  return v;
}

std::string FieldExpr::to_string() const {
  std::string out;
  print_node(*root_, 0, out);
  return out;
}

bool FieldExpr::structurally_equal(const FieldExpr& other) const {
  return dimension_ == other.dimension_ && equal_nodes(*root_, *other.root_);
}

bool FieldExpr::depends_on_space() const {
  return any_node(*root_, [](const Node& n) { return n.op == Op::Variable; });
}

bool FieldExpr::depends_on_time() const {
  return any_node(*root_, [](const Node& n) { return n.op == Op::Time; });
}

std::optional<double> FieldExpr::constant_value() const {
  if (root_->op == Op::Constant) return root_->value;
  return std::nullopt;
}

std::size_t FieldExpr::node_count() const { return count_nodes(*root_); }

FieldExpr operator+(const FieldExpr& a, const FieldExpr& b) {
  const int d = a.dimension_;
  if (a.root_->op == Op::Constant && b.root_->op == Op::Constant) {
    return FieldExpr::constant(a.root_->value + b.root_->value, d);
  }
  if (const_is(a.root_, 0.0)) return b;
  if (const_is(b.root_, 0.0)) return a;
  return FieldExpr(make_node(Op::Add, 0, 0, a.root_, b.root_), d);
}

FieldExpr operator-(const FieldExpr& a, const FieldExpr& b) {
  const int d = a.dimension_;
  if (a.root_->op == Op::Constant && b.root_->op == Op::Constant) {
    return FieldExpr::constant(a.root_->value - b.root_->value, d);
  }
  if (const_is(b.root_, 0.0)) return a;
  if (const_is(a.root_, 0.0)) return -b;
  return FieldExpr(make_node(Op::Sub, 0, 0, a.root_, b.root_), d);
}

FieldExpr operator*(const FieldExpr& a, const FieldExpr& b) {
  const int d = a.dimension_;
  if (a.root_->op == Op::Constant && b.root_->op == Op::Constant) {
    return FieldExpr::constant(a.root_->value * b.root_->value, d);
  }
  if (const_is(a.root_, 0.0) || const_is(b.root_, 0.0)) return FieldExpr::constant(0.0, d);
  if (const_is(a.root_, 1.0)) return b;
  if (const_is(b.root_, 1.0)) return a;
  if (const_is(a.root_, -1.0)) return -b;
  if (const_is(b.root_, -1.0)) return -a;
  return FieldExpr(make_node(Op::Mul, 0, 0, a.root_, b.root_), d);
}

FieldExpr operator/(const FieldExpr& a, const FieldExpr& b) {
  const int d = a.dimension_;
  if (a.root_->op == Op::Constant && b.root_->op == Op::Constant && b.root_->value != 0.0) {
    return FieldExpr::constant(a.root_->value / b.root_->value, d);
  }
  if (const_is(b.root_, 1.0)) return a;
  return FieldExpr(make_node(Op::Div, 0, 0, a.root_, b.root_), d);
}

FieldExpr operator-(const FieldExpr& a) {
  if (a.root_->op == Op::Constant) return FieldExpr::constant(-a.root_->value, a.dimension_);
  if (a.root_->op == Op::Neg) return FieldExpr(a.root_->lhs, a.dimension_);
  return FieldExpr(make_node(Op::Neg, 0, 0, a.root_), a.dimension_);
}

FieldExpr operator*(double c, const FieldExpr& a) { return FieldExpr::constant(c, a.dimension_) * a; }

FieldExpr pow(const FieldExpr& a, int exponent) {
  const int d = a.dimension_;
  if (exponent == 0) return FieldExpr::constant(1.0, d);
  if (exponent == 1) return a;
  if (a.root_->op == Op::Constant) {
    const double base = a.root_->value;
    if (auto v = try_fold([&] { return detail::integer_power(base, exponent); })) {
      return FieldExpr::constant(*v, d);
    }
  }
  return FieldExpr(make_node(Op::Pow, 0, exponent, a.root_), d);
}

namespace {
FieldExpr fold_unary(Op op, const FieldExpr& a, const FieldExpr::NodePtr& root, int d) {
  if (root->op == Op::Constant) {
    const double c = root->value;
    if (auto v = try_fold([&] { return apply_unary(op, c); })) return FieldExpr::constant(*v, d);
  }
  (void)a;
  return FieldExpr::make_raw(make_node(op, 0, 0, root), d);
}
}  // namespace

FieldExpr sin(const FieldExpr& a) { return fold_unary(Op::Sin, a, a.root_, a.dimension_); }
FieldExpr cos(const FieldExpr& a) { return fold_unary(Op::Cos, a, a.root_, a.dimension_); }
FieldExpr exp(const FieldExpr& a) { return fold_unary(Op::Exp, a, a.root_, a.dimension_); }
FieldExpr log(const FieldExpr& a) { return fold_unary(Op::Log, a, a.root_, a.dimension_); }
FieldExpr tanh(const FieldExpr& a) { return fold_unary(Op::Tanh, a, a.root_, a.dimension_); }

FieldExpr FieldExpr::differentiate(Variable var) const {
  if (!var.is_time() && (var.index < 0 || var.index >= dimension_)) {
    throw DimensionMismatch("differentiation variable out of range");
  }
  const int d = dimension_;
  std::function<FieldExpr(const NodePtr&)> diff = [&](const NodePtr& n) -> FieldExpr {
    const FieldExpr self(n, d);
    switch (n->op) {
      case Op::Constant:
        return constant(0.0, d);
      case Op::Variable:
        return constant(!var.is_time() && n->index == var.index ? 1.0 : 0.0, d);
      case Op::Time:
        return constant(var.is_time() ? 1.0 : 0.0, d);
      case Op::Add:
        return diff(n->lhs) + diff(n->rhs);
      case Op::Sub:
        return diff(n->lhs) - diff(n->rhs);
      case Op::Mul: {
        const FieldExpr a(n->lhs, d), b(n->rhs, d);
        return diff(n->lhs) * b + a * diff(n->rhs);
      }
      case Op::Div: {
        const FieldExpr a(n->lhs, d), b(n->rhs, d);
        return (diff(n->lhs) * b - a * diff(n->rhs)) / pow(b, 2);
      }
      case Op::Neg:
        return -diff(n->lhs);
      case Op::Pow: {
        const FieldExpr a(n->lhs, d);
        const int k = n->index;
        if (k == 0) return constant(0.0, d);
        return (constant(static_cast<double>(k), d) * pow(a, k - 1)) * diff(n->lhs);
      }
      case Op::Sin:
        return cos(FieldExpr(n->lhs, d)) * diff(n->lhs);
      case Op::Cos:
        return -sin(FieldExpr(n->lhs, d)) * diff(n->lhs);
      case Op::Exp:
        return self * diff(n->lhs);
      case Op::Log:
        return diff(n->lhs) / FieldExpr(n->lhs, d);
      case Op::Tanh:
        return (constant(1.0, d) - pow(self, 2)) * diff(n->lhs);
    }
    throw Error("unreachable");
  };
  return diff(root_);
}

// ---------------------------------------------------------------- CompiledField

CompiledField::CompiledField(const FieldExpr& expr) {
  int depth = 0;
  std::function<void(const Node&)> emit = [&](const Node& n) {
    if (n.lhs) emit(*n.lhs);
    if (n.rhs) emit(*n.rhs);
    code_.push_back(Instr{n.op, n.index, n.value});
    if (n.op == Op::Constant || n.op == Op::Variable || n.op == Op::Time) {
      ++depth;
    } else if (is_binary(n.op)) {
      --depth;
    }
    max_stack_ = std::max(max_stack_, depth);
  };
  emit(expr.root());
  if (!expr.depends_on_space() && !expr.depends_on_time()) {
    try {
      const std::array<double, kMaxDim> zero{};
      constant_ = expr.evaluate(std::span<const double>(zero.data(), static_cast<std::size_t>(expr.dimension())), 0.0);
    } catch (const DomainError&) {
      constant_.reset();
    }
  }
}

#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wmaybe-uninitialized"
double CompiledField::operator()(const double* x, double t) const {
  if (constant_) return *constant_;
  constexpr int kInline = 64;
  double inline_stack[kInline];
  std::vector<double> heap_stack;
  double* stack = inline_stack;
  if (max_stack_ > kInline) {
    heap_stack.resize(static_cast<std::size_t>(max_stack_));
    stack = heap_stack.data();
  }
  int sp = 0;
  for (const Instr& in : code_) {
    switch (in.op) {
      case Op::Constant:
        stack[sp++] = in.value;
        break;
      case Op::Variable:
        stack[sp++] = x[in.index];
        break;
      case Op::Time:
        stack[sp++] = t;
        break;
      case Op::Add:
        --sp;
        stack[sp - 1] = stack[sp - 1] + stack[sp];
        break;
      case Op::Sub:
        --sp;
        stack[sp - 1] = stack[sp - 1] - stack[sp];
        break;
      case Op::Mul:
        --sp;
        stack[sp - 1] = stack[sp - 1] * stack[sp];
        break;
      case Op::Div:
        --sp;
        if (stack[sp] == 0.0) throw DomainError("division by zero");
        stack[sp - 1] = stack[sp - 1] / stack[sp];
        break;
      case Op::Pow:
        stack[sp - 1] = detail::integer_power(stack[sp - 1], in.index);
        break;
      case Op::Neg:
        stack[sp - 1] = -stack[sp - 1];
        break;
      case Op::Sin:
        stack[sp - 1] = std::sin(stack[sp - 1]);
        break;
      case Op::Cos:
        stack[sp - 1] = std::cos(stack[sp - 1]);
        break;
      case Op::Exp:
        stack[sp - 1] = std::exp(stack[sp - 1]);
        break;
      case Op::Log:
        if (!(stack[sp - 1] > 0.0)) throw DomainError("log of non-positive argument");
        stack[sp - 1] = std::log(stack[sp - 1]);
        break;
      case Op::Tanh:
        stack[sp - 1] = std::tanh(stack[sp - 1]);
        break;
    }
  }
  const double v = stack[0];
  if (!std::isfinite(v)) throw DomainError("non-finite field value");
  return v;
}
#pragma GCC diagnostic pop

}  // namespace stochlag
