#include "micn/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace micn::ad {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "(" << m.rows() << ", " << m.cols() << ")";
  return os.str();
}

[[noreturn]] void shape_fail(Op op, const std::string& detail) {
  throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

void require_same(Op op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_fail(op, "operand shapes differ " + shape_str(a.value()) + " vs " +
                       shape_str(b.value()));
  }
}

void require_defined(Op op, const Tensor& t) {
  if (!t.defined()) shape_fail(op, "undefined operand");
}

struct Attrs {
  double a = 0.0;
  double b = 0.0;
  Index i0 = 0;
  Index i1 = 0;
};

Tensor make(Op op, Matrix value, std::initializer_list<const Tensor*> parents,
            Attrs attrs = {}) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->value = std::move(value);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->a = attrs.a;
  node->b = attrs.b;
  node->i0 = attrs.i0;
  node->i1 = attrs.i1;
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor* p : parents) any = any || p->requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (const Tensor* p : parents) node->parents.push_back(p->node());
    }
  }
  return Tensor(std::move(node));
}

Tensor wrap(const std::shared_ptr<Node>& n) { return Tensor(n); }

Matrix clamp_mask(const Matrix& x, double lo, double hi) {
  return ((x.array() >= lo) && (x.array() <= hi)).cast<double>().matrix();
}

// Nodes reachable from `root` through differentiable links, ascending id.
std::vector<std::shared_ptr<Node>> collect(const std::shared_ptr<Node>& root) {
  std::vector<std::shared_ptr<Node>> out;
  std::unordered_set<const Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    out.push_back(std::move(n));
  }
  std::sort(out.begin(), out.end(),
            [](const auto& x, const auto& y) { return x->id < y->id; });
  return out;
}

using Grad = std::optional<Tensor>;

Tensor accumulate(const Grad& acc, const Tensor& g) {
  return acc ? add(*acc, g) : g;
}

// Reverse-mode rule: gradient contributions to each parent.
std::vector<Grad> backward_rule(const std::shared_ptr<Node>& n, const Tensor& g) {
  const auto& p = n->parents;
  auto P = [&](std::size_t k) { return wrap(p[k]); };
  switch (n->op) {
    case Op::Leaf:
      return {};
    case Op::MatMul:
      return {matmul(g, transpose(P(1))), matmul(transpose(P(0)), g)};
    case Op::Add:
      return {g, g};
    case Op::Sub:
      return {g, affine(g, -1.0, 0.0)};
    case Op::Mul:
      return {mul(g, P(1)), mul(g, P(0))};
    case Op::Div: {
      Tensor y = wrap(n);
      return {div(g, P(1)), affine(div(mul(g, y), P(1)), -1.0, 0.0)};
    }
    case Op::Affine:
      return {affine(g, n->a, 0.0)};
    case Op::Sigmoid: {
      Tensor y = wrap(n);
      return {mul(g, mul(y, affine(y, -1.0, 1.0)))};
    }
    case Op::SumRows:
      return {broadcast_rows(g, p[0]->value.rows())};
    case Op::SumCols:
      return {broadcast_cols(g, p[0]->value.cols())};
    case Op::BroadcastRows:
      return {sum_rows(g)};
    case Op::BroadcastCols:
      return {sum_cols(g)};
    case Op::Transpose:
      return {transpose(g)};
    case Op::SliceCols:
      return {pad_cols(g, n->i0, p[0]->value.cols())};
    case Op::PadCols:
      return {slice_cols(g, n->i0, p[0]->value.cols())};
    case Op::ConcatCols: {
      const Index ca = p[0]->value.cols();
      const Index cb = p[1]->value.cols();
      return {slice_cols(g, 0, ca), slice_cols(g, ca, cb)};
    }
    case Op::Clamp:
      return {mul(g, Tensor::constant(clamp_mask(p[0]->value, n->a, n->b)))};
  }
  return {};
}

// Forward-mode rule: tangent of `n` from parent tangents.
Grad forward_rule(const std::shared_ptr<Node>& n, const std::vector<Grad>& d) {
  const auto& p = n->parents;
  auto P = [&](std::size_t k) { return wrap(p[k]); };
  auto sum2 = [](const Grad& x, const Grad& y) -> Grad {
    if (x && y) return add(*x, *y);
    return x ? x : y;
  };
  switch (n->op) {
    case Op::Leaf:
      return std::nullopt;
    case Op::MatMul: {
      Grad l = d[0] ? Grad(matmul(*d[0], P(1))) : std::nullopt;
      Grad r = d[1] ? Grad(matmul(P(0), *d[1])) : std::nullopt;
      return sum2(l, r);
    }
    case Op::Add:
      return sum2(d[0], d[1]);
    case Op::Sub: {
      if (d[0] && d[1]) return sub(*d[0], *d[1]);
      if (d[0]) return d[0];
      return affine(*d[1], -1.0, 0.0);
    }
    case Op::Mul: {
      Grad l = d[0] ? Grad(mul(*d[0], P(1))) : std::nullopt;
      Grad r = d[1] ? Grad(mul(P(0), *d[1])) : std::nullopt;
      return sum2(l, r);
    }
    case Op::Div: {
      Tensor y = wrap(n);
      if (d[0] && d[1]) return div(sub(*d[0], mul(y, *d[1])), P(1));
      if (d[0]) return div(*d[0], P(1));
      return affine(div(mul(y, *d[1]), P(1)), -1.0, 0.0);
    }
    case Op::Affine:
      return affine(*d[0], n->a, 0.0);
    case Op::Sigmoid: {
      Tensor y = wrap(n);
      return mul(*d[0], mul(y, affine(y, -1.0, 1.0)));
    }
    case Op::SumRows:
      return sum_rows(*d[0]);
    case Op::SumCols:
      return sum_cols(*d[0]);
    case Op::BroadcastRows:
      return broadcast_rows(*d[0], n->i0);
    case Op::BroadcastCols:
      return broadcast_cols(*d[0], n->i0);
    case Op::Transpose:
      return transpose(*d[0]);
    case Op::SliceCols:
      return slice_cols(*d[0], n->i0, n->i1);
    case Op::PadCols:
      return pad_cols(*d[0], n->i0, n->i1);
    case Op::ConcatCols: {
      Tensor l = d[0] ? *d[0] : Tensor::zeros(p[0]->value.rows(), p[0]->value.cols());
      Tensor r = d[1] ? *d[1] : Tensor::zeros(p[1]->value.rows(), p[1]->value.cols());
      return concat_cols(l, r);
    }
    case Op::Clamp:
      return mul(*d[0], Tensor::constant(clamp_mask(p[0]->value, n->a, n->b)));
  }
  return std::nullopt;
}

// Re-issue a recorded operation on new operands.
Tensor replay(const Node& n, const std::vector<Tensor>& in) {
  switch (n.op) {
    case Op::Leaf: break;
    case Op::MatMul: return matmul(in[0], in[1]);
    case Op::Add: return add(in[0], in[1]);
    case Op::Sub: return sub(in[0], in[1]);
    case Op::Mul: return mul(in[0], in[1]);
    case Op::Div: return div(in[0], in[1]);
    case Op::Affine: return affine(in[0], n.a, n.b);
    case Op::Sigmoid: return sigmoid(in[0]);
    case Op::SumRows: return sum_rows(in[0]);
    case Op::SumCols: return sum_cols(in[0]);
    case Op::BroadcastRows: return broadcast_rows(in[0], n.i0);
    case Op::BroadcastCols: return broadcast_cols(in[0], n.i0);
    case Op::Transpose: return transpose(in[0]);
    case Op::SliceCols: return slice_cols(in[0], n.i0, n.i1);
    case Op::PadCols: return pad_cols(in[0], n.i0, n.i1);
    case Op::ConcatCols: return concat_cols(in[0], in[1]);
    case Op::Clamp: return clamp(in[0], n.a, n.b);
  }
  throw std::logic_error("replay of a leaf");
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Affine: return "affine";
    case Op::Sigmoid: return "sigmoid";
    case Op::SumRows: return "sum_rows";
    case Op::SumCols: return "sum_cols";
    case Op::BroadcastRows: return "broadcast_rows";
    case Op::BroadcastCols: return "broadcast_cols";
    case Op::Transpose: return "transpose";
    case Op::SliceCols: return "slice_cols";
    case Op::PadCols: return "pad_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::Clamp: return "clamp";
  }
  return "unknown";
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::constant(Matrix value) {
  if (value.rows() <= 0 || value.cols() <= 0) {
    throw ShapeError("leaf: dimensions must be positive");
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::variable(Matrix value) {
  Tensor t = constant(std::move(value));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(Index rows, Index cols) { return constant(Matrix::Zero(rows, cols)); }

Tensor Tensor::scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

const Matrix& Tensor::value() const {
  if (!node_) throw std::logic_error("value() of an undefined tensor");
  return node_->value;
}

Matrix& Tensor::leaf_value() {
  if (!node_ || node_->op != Op::Leaf) {
    throw std::logic_error("leaf_value() requires a leaf tensor");
  }
  return node_->value;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
Op Tensor::op() const { return node_->op; }
std::uint64_t Tensor::id() const { return node_->id; }

double Tensor::item() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw ShapeError("item: tensor is not 1x1 but " + shape_str(v));
  }
  return v(0, 0);
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { t_grad_enabled = previous_; }

// ------------------------------------------------------------ primitives

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(Op::MatMul, a);
  require_defined(Op::MatMul, b);
  if (a.cols() != b.rows()) {
    shape_fail(Op::MatMul, "inner dimensions differ " + shape_str(a.value()) + " x " +
                               shape_str(b.value()));
  }
  return make(Op::MatMul, a.value() * b.value(), {&a, &b});
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(Op::Add, a);
  require_defined(Op::Add, b);
  require_same(Op::Add, a, b);
  return make(Op::Add, a.value() + b.value(), {&a, &b});
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(Op::Sub, a);
  require_defined(Op::Sub, b);
  require_same(Op::Sub, a, b);
  return make(Op::Sub, a.value() - b.value(), {&a, &b});
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(Op::Mul, a);
  require_defined(Op::Mul, b);
  require_same(Op::Mul, a, b);
  return make(Op::Mul, a.value().cwiseProduct(b.value()), {&a, &b});
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_defined(Op::Div, a);
  require_defined(Op::Div, b);
  require_same(Op::Div, a, b);
  return make(Op::Div, a.value().cwiseQuotient(b.value()), {&a, &b});
}

Tensor affine(const Tensor& x, double scale, double shift) {
  require_defined(Op::Affine, x);
  Matrix v = (x.value().array() * scale + shift).matrix();
  return make(Op::Affine, std::move(v), {&x}, {.a = scale, .b = shift});
}

Tensor sigmoid(const Tensor& x) {
  require_defined(Op::Sigmoid, x);
  Matrix v = x.value().unaryExpr([](double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
  });
  return make(Op::Sigmoid, std::move(v), {&x});
}

Tensor sum_rows(const Tensor& x) {
  require_defined(Op::SumRows, x);
  return make(Op::SumRows, x.value().colwise().sum(), {&x});
}

Tensor sum_cols(const Tensor& x) {
  require_defined(Op::SumCols, x);
  return make(Op::SumCols, x.value().rowwise().sum(), {&x});
}

Tensor broadcast_rows(const Tensor& x, Index count) {
  require_defined(Op::BroadcastRows, x);
  if (x.rows() != 1) shape_fail(Op::BroadcastRows, "expects one row, got " + shape_str(x.value()));
  if (count <= 0) shape_fail(Op::BroadcastRows, "count must be positive");
  return make(Op::BroadcastRows, x.value().replicate(count, 1), {&x}, {.i0 = count});
}

Tensor broadcast_cols(const Tensor& x, Index count) {
  require_defined(Op::BroadcastCols, x);
  if (x.cols() != 1) shape_fail(Op::BroadcastCols, "expects one column, got " + shape_str(x.value()));
  if (count <= 0) shape_fail(Op::BroadcastCols, "count must be positive");
  return make(Op::BroadcastCols, x.value().replicate(1, count), {&x}, {.i0 = count});
}

Tensor transpose(const Tensor& x) {
  require_defined(Op::Transpose, x);
  return make(Op::Transpose, x.value().transpose(), {&x});
}

Tensor slice_cols(const Tensor& x, Index offset, Index width) {
  require_defined(Op::SliceCols, x);
  if (offset < 0 || width <= 0 || offset + width > x.cols()) {
    shape_fail(Op::SliceCols, "columns [" + std::to_string(offset) + ", " +
                                  std::to_string(offset + width) + ") out of " +
                                  shape_str(x.value()));
  }
  Matrix v = x.value().middleCols(offset, width);
  return make(Op::SliceCols, std::move(v), {&x}, {.i0 = offset, .i1 = width});
}

Tensor pad_cols(const Tensor& x, Index offset, Index total) {
  require_defined(Op::PadCols, x);
  if (offset < 0 || offset + x.cols() > total) {
    shape_fail(Op::PadCols, "cannot place " + shape_str(x.value()) + " at column " +
                                std::to_string(offset) + " of " + std::to_string(total));
  }
  Matrix v = Matrix::Zero(x.rows(), total);
  v.middleCols(offset, x.cols()) = x.value();
  return make(Op::PadCols, std::move(v), {&x}, {.i0 = offset, .i1 = total});
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_defined(Op::ConcatCols, a);
  require_defined(Op::ConcatCols, b);
  if (a.rows() != b.rows()) {
    shape_fail(Op::ConcatCols, "row counts differ " + shape_str(a.value()) + " vs " +
                                   shape_str(b.value()));
  }
  Matrix v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  return make(Op::ConcatCols, std::move(v), {&a, &b});
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  require_defined(Op::Clamp, x);
  if (!(lo <= hi)) shape_fail(Op::Clamp, "empty interval");
  Matrix v = x.value().cwiseMax(lo).cwiseMin(hi);
  return make(Op::Clamp, std::move(v), {&x}, {.a = lo, .b = hi});
}

// ------------------------------------------------------------ composites

Tensor silu(const Tensor& x) { return mul(x, sigmoid(x)); }

Tensor sum_all(const Tensor& x) { return sum_rows(sum_cols(x)); }

Tensor mean_all(const Tensor& x) {
  const double n = static_cast<double>(x.rows() * x.cols());
  return affine(sum_all(x), 1.0 / n, 0.0);
}

Tensor dot_rows(const Tensor& a, const Tensor& b) { return sum_cols(mul(a, b)); }

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add(matmul(x, transpose(weight)), broadcast_rows(bias, x.rows()));
}

Tensor scale_rows(const Tensor& x, const Tensor& coef) {
  return mul(x, broadcast_cols(coef, x.cols()));
}

Tensor detach(const Tensor& x) { return Tensor::constant(x.value()); }

// -------------------------------------------------------- differentiation

std::vector<Tensor> gradient(const Tensor& scalar, std::span<const Tensor> wrt,
                             bool create_graph) {
  if (!scalar.defined() || scalar.rows() != 1 || scalar.cols() != 1) {
    throw ShapeError("gradient: output must be a 1x1 scalar");
  }
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  auto zeros_like = [](const Tensor& t) { return Tensor::zeros(t.rows(), t.cols()); };
  if (!scalar.requires_grad()) {
    for (const auto& w : wrt) out.push_back(zeros_like(w));
    return out;
  }

  const auto order = collect(scalar.node());
  std::unordered_set<const Node*> targets;
  for (const auto& w : wrt) {
    if (w.defined()) targets.insert(w.node().get());
  }
  // Nodes with a path from some target; gradients only flow along these.
  std::unordered_set<const Node*> relevant;
  for (const auto& n : order) {
    bool r = targets.count(n.get()) > 0;
    for (const auto& p : n->parents) r = r || relevant.count(p.get()) > 0;
    if (r) relevant.insert(n.get());
  }

  std::optional<NoGradGuard> no_grad;
  std::optional<EnableGradGuard> with_grad;
  if (create_graph) {
    with_grad.emplace();
  } else {
    no_grad.emplace();
  }

  std::unordered_map<const Node*, Grad> grads;
  grads[scalar.node().get()] = Tensor::scalar(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& n = *it;
    if (n->op == Op::Leaf || !relevant.count(n.get())) continue;
    auto g = grads.find(n.get());
    if (g == grads.end() || !g->second) continue;
    const Tensor upstream = *g->second;
    auto contrib = backward_rule(n, upstream);
    for (std::size_t k = 0; k < n->parents.size(); ++k) {
      const Node* p = n->parents[k].get();
      if (!p->requires_grad || !relevant.count(p) || !contrib[k]) continue;
      grads[p] = accumulate(grads[p], *contrib[k]);
    }
    if (!targets.count(n.get())) grads.erase(n.get());
  }

  for (const auto& w : wrt) {
    auto g = w.defined() ? grads.find(w.node().get()) : grads.end();
    if (g != grads.end() && g->second) {
      out.push_back(*g->second);
    } else {
      out.push_back(zeros_like(w));
    }
  }
  return out;
}

Tensor vjp(const Tensor& outputs, const Tensor& inputs, const Tensor& cotangent,
           bool create_graph) {
  if (!cotangent.defined() || cotangent.rows() != outputs.rows() ||
      cotangent.cols() != outputs.cols()) {
    throw ShapeError("vjp: cotangent shape must equal output shape " +
                     shape_str(outputs.value()));
  }
  if (!inputs.requires_grad()) {
    throw std::invalid_argument("vjp: inputs must be a differentiable tensor");
  }
  Tensor contracted;
  {
    EnableGradGuard g;
    contracted = sum_all(mul(outputs, cotangent));
  }
  Tensor wrt[] = {inputs};
  return gradient(contracted, wrt, create_graph)[0];
}

Tensor jvp(const Tensor& outputs, const Tensor& inputs, const Tensor& tangent) {
  if (!tangent.defined() || tangent.rows() != inputs.rows() ||
      tangent.cols() != inputs.cols()) {
    throw ShapeError("jvp: tangent shape must equal input shape " +
                     shape_str(inputs.value()));
  }
  if (!inputs.requires_grad()) {
    throw std::invalid_argument("jvp: inputs must be a differentiable tensor");
  }
  if (!outputs.requires_grad()) return Tensor::zeros(outputs.rows(), outputs.cols());

  const auto order = collect(outputs.node());
  std::unordered_map<const Node*, Tensor> tangents;
  tangents[inputs.node().get()] = tangent;
  for (const auto& n : order) {
    if (n->op == Op::Leaf) continue;
    std::vector<Grad> d(n->parents.size());
    bool any = false;
    for (std::size_t k = 0; k < n->parents.size(); ++k) {
      auto it = tangents.find(n->parents[k].get());
      if (it != tangents.end()) {
        d[k] = it->second;
        any = true;
      }
    }
    if (!any) continue;
    if (auto t = forward_rule(n, d)) tangents[n.get()] = *t;
  }
  auto it = tangents.find(outputs.node().get());
  if (it == tangents.end()) return Tensor::zeros(outputs.rows(), outputs.cols());
  return it->second;
}

// ----------------------------------------------------------------- Graph

Graph::Graph(std::vector<Tensor> inputs, std::vector<Tensor> outputs)
    : inputs_(std::move(inputs)), outputs_(std::move(outputs)) {
  for (const auto& in : inputs_) {
    if (!in.defined() || in.op() != Op::Leaf || !in.requires_grad()) {
      throw std::invalid_argument("Graph: inputs must be variable leaves");
    }
  }
  std::unordered_set<const Node*> seen;
  for (const auto& out : outputs_) {
    if (!out.defined()) throw std::invalid_argument("Graph: undefined output");
    for (auto& n : collect(out.node())) {
      if (n->op != Op::Leaf && seen.insert(n.get()).second) order_.push_back(std::move(n));
    }
  }
  std::sort(order_.begin(), order_.end(),
            [](const auto& x, const auto& y) { return x->id < y->id; });
}

std::vector<Op> Graph::operations() const {
  std::vector<Op> ops;
  ops.reserve(order_.size());
  for (const auto& n : order_) ops.push_back(n->op);
  return ops;
}

std::vector<Tensor> Graph::evaluate(std::span<const Tensor> inputs) const {
  if (inputs.size() != inputs_.size()) {
    throw ShapeError("Graph: expected " + std::to_string(inputs_.size()) + " inputs, got " +
                     std::to_string(inputs.size()));
  }
  std::unordered_map<const Node*, Tensor> mapped;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    mapped[inputs_[k].node().get()] = inputs[k];
  }
  auto lookup = [&](const std::shared_ptr<Node>& n) {
    auto it = mapped.find(n.get());
    return it != mapped.end() ? it->second : Tensor(n);
  };
  for (std::size_t k = 0; k < order_.size(); ++k) {
    const auto& n = order_[k];
    std::vector<Tensor> in;
    in.reserve(n->parents.size());
    for (const auto& p : n->parents) in.push_back(lookup(p));
    try {
      mapped[n.get()] = replay(*n, in);
    } catch (const ShapeError& e) {
      throw ShapeError("operation " + std::to_string(k) + " (" +
                       std::string(op_name(n->op)) + ") rejected: " + e.what());
    }
  }
  std::vector<Tensor> out;
  out.reserve(outputs_.size());
  for (const auto& o : outputs_) out.push_back(lookup(o.node()));
  return out;
}

}  // namespace micn::ad
