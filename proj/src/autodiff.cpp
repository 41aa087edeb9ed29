#include "dr4sr/autodiff.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace dr4sr::ad {

namespace {
thread_local bool g_tape_enabled = true;
}

bool tape_enabled() { return g_tape_enabled; }

NoTapeGuard::NoTapeGuard() : prev_(g_tape_enabled) { g_tape_enabled = false; }
NoTapeGuard::~NoTapeGuard() { g_tape_enabled = prev_; }

TapeStateGuard::TapeStateGuard(bool on) : prev_(g_tape_enabled) { g_tape_enabled = on; }
TapeStateGuard::~TapeStateGuard() { g_tape_enabled = prev_; }

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Matrix& Var::value() const {
  assert(node_);
  return node_->value;
}

Matrix& Var::raw() {
  assert(node_);
  return node_->value;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

double Var::scalar() const {
  const Matrix& m = value();
  if (m.rows() != 1 || m.cols() != 1) throw std::invalid_argument("Var::scalar: not 1x1");
  return m(0, 0);
}

Var Var::detach() const {
  if (!node_) return Var{};
  return Var(node_->value, false);
}

Var make_node(Matrix value, std::vector<Var> parents,
              std::function<std::vector<Var>(const Var&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  if (g_tape_enabled) {
    for (const auto& p : parents)
      if (p.requires_grad()) any = true;
  }
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

Var constant(Matrix m) { return Var(std::move(m), false); }
Var scalar_const(double v) { return Var(Matrix::Constant(1, 1, v), false); }

namespace {
void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}
}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_node(a.value() + b.value(), {a, b},
                   [](const Var& g) -> std::vector<Var> { return {g, g}; });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_node(a.value() - b.value(), {a, b},
                   [](const Var& g) -> std::vector<Var> { return {g, neg(g)}; });
}

Var neg(const Var& a) {
  return make_node(-a.value(), {a},
                   [](const Var& g) -> std::vector<Var> { return {neg(g)}; });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_node(a.value().cwiseProduct(b.value()), {a, b},
                   [a, b](const Var& g) -> std::vector<Var> {
                     return {mul(g, b), mul(g, a)};
                   });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dim mismatch");
  return make_node(a.value() * b.value(), {a, b},
                   [a, b](const Var& g) -> std::vector<Var> {
                     return {matmul(g, transpose(b)), matmul(transpose(a), g)};
                   });
}

Var transpose(const Var& a) {
  return make_node(a.value().transpose(), {a},
                   [](const Var& g) -> std::vector<Var> { return {transpose(g)}; });
}

Var scale(const Var& a, double s) {
  return make_node(a.value() * s, {a},
                   [s](const Var& g) -> std::vector<Var> { return {scale(g, s)}; });
}

Var add_scalar(const Var& a, double s) {
  return make_node(a.value().array() + s, {a},
                   [](const Var& g) -> std::vector<Var> { return {g}; });
}

Var sum_all(const Var& a) {
  const Eigen::Index r = a.rows(), c = a.cols();
  return make_node(Matrix::Constant(1, 1, a.value().sum()), {a},
                   [r, c](const Var& g) -> std::vector<Var> {
                     return {broadcast_scalar(g, r, c)};
                   });
}

Var mean_all(const Var& a) {
  const double n = static_cast<double>(a.rows() * a.cols());
  return scale(sum_all(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  const Eigen::Index c = a.cols();
  return make_node(a.value().rowwise().sum(), {a},
                   [c](const Var& g) -> std::vector<Var> {
                     return {broadcast_cols(g, c)};
                   });
}

Var col_sum(const Var& a) {
  const Eigen::Index r = a.rows();
  return make_node(a.value().colwise().sum(), {a},
                   [r](const Var& g) -> std::vector<Var> {
                     return {broadcast_rows(g, r)};
                   });
}

Var broadcast_cols(const Var& a, Eigen::Index cols) {
  if (a.cols() != 1) throw std::invalid_argument("broadcast_cols: input must be r x 1");
  return make_node(a.value().replicate(1, cols), {a},
                   [](const Var& g) -> std::vector<Var> { return {row_sum(g)}; });
}

Var broadcast_rows(const Var& a, Eigen::Index rows) {
  if (a.rows() != 1) throw std::invalid_argument("broadcast_rows: input must be 1 x c");
  return make_node(a.value().replicate(rows, 1), {a},
                   [](const Var& g) -> std::vector<Var> { return {col_sum(g)}; });
}

Var broadcast_scalar(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (a.rows() != 1 || a.cols() != 1)
    throw std::invalid_argument("broadcast_scalar: input must be 1 x 1");
  return make_node(Matrix::Constant(rows, cols, a.value()(0, 0)), {a},
                   [](const Var& g) -> std::vector<Var> { return {sum_all(g)}; });
}

// Unary elementwise helpers recompute the forward value inside backward when
// the tape is live (so higher derivatives see the dependency) and reuse the
// cached value otherwise.
Var exp(const Var& a) {
  Matrix out = a.value().array().exp();
  Matrix cached = out;
  return make_node(std::move(out), {a},
                   [a, cached](const Var& g) -> std::vector<Var> {
                     Var f = tape_enabled() ? exp(a) : constant(cached);
                     return {mul(g, f)};
                   });
}

Var log(const Var& a) {
  return make_node(a.value().array().log(), {a},
                   [a](const Var& g) -> std::vector<Var> {
                     return {mul(g, reciprocal(a))};
                   });
}

namespace {
double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return sigmoid_stable(x); });
  Matrix cached = out;
  return make_node(std::move(out), {a},
                   [a, cached](const Var& g) -> std::vector<Var> {
                     Var s = tape_enabled() ? sigmoid(a) : constant(cached);
                     Var one_minus = add_scalar(neg(s), 1.0);
                     return {mul(g, mul(s, one_minus))};
                   });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh();
  Matrix cached = out;
  return make_node(std::move(out), {a},
                   [a, cached](const Var& g) -> std::vector<Var> {
                     Var t = tape_enabled() ? tanh(a) : constant(cached);
                     Var d = add_scalar(neg(mul(t, t)), 1.0);
                     return {mul(g, d)};
                   });
}

Var softplus(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
  });
  return make_node(std::move(out), {a},
                   [a](const Var& g) -> std::vector<Var> {
                     return {mul(g, sigmoid(a))};
                   });
}

Var reciprocal(const Var& a) {
  Matrix out = a.value().cwiseInverse();
  Matrix cached = out;
  return make_node(std::move(out), {a},
                   [a, cached](const Var& g) -> std::vector<Var> {
                     Var r = tape_enabled() ? reciprocal(a) : constant(cached);
                     return {neg(mul(g, mul(r, r)))};
                   });
}

Var pow_scalar(const Var& a, double p) {
  Matrix out = a.value().array().pow(p);
  return make_node(std::move(out), {a},
                   [a, p](const Var& g) -> std::vector<Var> {
                     return {scale(mul(g, pow_scalar(a, p - 1.0)), p)};
                   });
}

Var gather_rows(const Var& a, const std::vector<int>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows())
      throw std::invalid_argument("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  const Eigen::Index total = a.rows();
  return make_node(std::move(out), {a},
                   [idx, total](const Var& g) -> std::vector<Var> {
                     return {scatter_rows(g, idx, total)};
                   });
}

Var scatter_rows(const Var& a, const std::vector<int>& idx, Eigen::Index total_rows) {
  if (a.rows() != static_cast<Eigen::Index>(idx.size()))
    throw std::invalid_argument("scatter_rows: rows != idx size");
  Matrix out = Matrix::Zero(total_rows, a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= total_rows)
      throw std::invalid_argument("scatter_rows: index out of range");
    out.row(idx[i]) += a.value().row(static_cast<Eigen::Index>(i));
  }
  return make_node(std::move(out), {a},
                   [idx](const Var& g) -> std::vector<Var> {
                     return {gather_rows(g, idx)};
                   });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index len) {
  if (start < 0 || len < 0 || start + len > a.rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  Matrix out = a.value().middleRows(start, len);
  const Eigen::Index total = a.rows();
  return make_node(std::move(out), {a},
                   [start, total](const Var& g) -> std::vector<Var> {
                     return {pad_rows(g, total, start)};
                   });
}

Var pad_rows(const Var& a, Eigen::Index total_rows, Eigen::Index start) {
  if (start < 0 || start + a.rows() > total_rows)
    throw std::invalid_argument("pad_rows: range out of bounds");
  Matrix out = Matrix::Zero(total_rows, a.cols());
  out.middleRows(start, a.rows()) = a.value();
  const Eigen::Index len = a.rows();
  return make_node(std::move(out), {a},
                   [start, len](const Var& g) -> std::vector<Var> {
                     return {slice_rows(g, start, len)};
                   });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index len) {
  if (start < 0 || len < 0 || start + len > a.cols())
    throw std::invalid_argument("slice_cols: range out of bounds");
  Matrix out = a.value().middleCols(start, len);
  const Eigen::Index total = a.cols();
  return make_node(std::move(out), {a},
                   [start, total](const Var& g) -> std::vector<Var> {
                     return {pad_cols(g, total, start)};
                   });
}

Var pad_cols(const Var& a, Eigen::Index total_cols, Eigen::Index start) {
  if (start < 0 || start + a.cols() > total_cols)
    throw std::invalid_argument("pad_cols: range out of bounds");
  Matrix out = Matrix::Zero(a.rows(), total_cols);
  out.middleCols(start, a.cols()) = a.value();
  const Eigen::Index len = a.cols();
  return make_node(std::move(out), {a},
                   [start, len](const Var& g) -> std::vector<Var> {
                     return {slice_cols(g, start, len)};
                   });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets(parts.size());
  std::vector<Eigen::Index> lens(parts.size());
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    offsets[i] = at;
    lens[i] = parts[i].rows();
    out.middleRows(at, parts[i].rows()) = parts[i].value();
    at += parts[i].rows();
  }
  return make_node(std::move(out), parts,
                   [offsets, lens](const Var& g) -> std::vector<Var> {
                     std::vector<Var> grads(offsets.size());
                     for (std::size_t i = 0; i < offsets.size(); ++i)
                       grads[i] = slice_rows(g, offsets[i], lens[i]);
                     return grads;
                   });
}

Var dot(const Var& a, const Var& b) { return sum_all(mul(a, b)); }

Var sum_list(const std::vector<Var>& terms) {
  if (terms.empty()) throw std::invalid_argument("sum_list: empty input");
  std::vector<Var> level = terms;
  while (level.size() > 1) {
    std::vector<Var> next;
    next.reserve((level.size() + 1) / 2);
    for (std::size_t i = 0; i + 1 < level.size(); i += 2) next.push_back(add(level[i], level[i + 1]));
    if (level.size() % 2 == 1) next.push_back(level.back());
    level = std::move(next);
  }
  return level.front();
}

Var softmax_rows(const Var& a) {
  // Subtracting the (detached) row max leaves the function unchanged.
  Matrix mx = a.value().rowwise().maxCoeff();
  Var shifted = sub(a, broadcast_cols(constant(mx), a.cols()));
  Var e = exp(shifted);
  Var denom = broadcast_cols(reciprocal(row_sum(e)), a.cols());
  return mul(e, denom);
}

Var log_softmax_rows(const Var& a) {
  Matrix mx = a.value().rowwise().maxCoeff();
  Var shifted = sub(a, broadcast_cols(constant(mx), a.cols()));
  Var lse = log(row_sum(exp(shifted)));
  return sub(shifted, broadcast_cols(lse, a.cols()));
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Eigen::Index d = x.cols();
  Var mu = scale(row_sum(x), 1.0 / static_cast<double>(d));
  Var centered = sub(x, broadcast_cols(mu, d));
  Var var = scale(row_sum(mul(centered, centered)), 1.0 / static_cast<double>(d));
  Var inv_std = pow_scalar(add_scalar(var, eps), -0.5);
  Var normed = mul(centered, broadcast_cols(inv_std, d));
  return add(mul(normed, broadcast_rows(gain, x.rows())),
             broadcast_rows(bias, x.rows()));
}

Var gelu(const Var& a) {
  // tanh approximation; smooth everywhere, which keeps finite-difference
  // gradient checks clean.
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  Var cubed = mul(mul(a, a), a);
  Var inner = scale(add(a, scale(cubed, 0.044715)), kSqrt2OverPi);
  Var t = tanh(inner);
  return scale(mul(a, add_scalar(t, 1.0)), 0.5);
}

std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs,
                      bool create_graph) {
  if (!output.defined()) throw std::invalid_argument("grad: undefined output");
  if (output.rows() != 1 || output.cols() != 1)
    throw std::invalid_argument("grad: output must be a 1x1 scalar");

  auto zeros_like = [](const Var& v) { return constant(Matrix::Zero(v.rows(), v.cols())); };

  std::vector<Var> result(inputs.size());
  if (!output.requires_grad()) {
    for (std::size_t i = 0; i < inputs.size(); ++i) result[i] = zeros_like(inputs[i]);
    return result;
  }

  // Reverse post-order DFS yields a topological order in which every node
  // appears before its parents.
  std::vector<Node*> order;
  {
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(output.node_ptr(), 0);
    visited.insert(output.node_ptr());
    while (!stack.empty()) {
      auto& [n, child] = stack.back();
      if (child < n->parents.size()) {
        Node* p = n->parents[child].node_ptr();
        ++child;
        if (p != nullptr && p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Node*, Var> grads;
  grads[output.node_ptr()] = constant(Matrix::Ones(1, 1));

  TapeStateGuard tape(create_graph);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto found = grads.find(n);
    if (found == grads.end()) continue;
    if (!n->backward) continue;
    const Var& g = found->second;
    std::vector<Var> parent_grads = n->backward(g);
    if (parent_grads.size() != n->parents.size())
      throw std::logic_error("grad: backward arity mismatch");
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      const Var& p = n->parents[i];
      if (!p.requires_grad() || !parent_grads[i].defined()) continue;
      auto slot = grads.find(p.node_ptr());
      if (slot == grads.end())
        grads.emplace(p.node_ptr(), parent_grads[i]);
      else
        slot->second = add(slot->second, parent_grads[i]);
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto found = grads.find(inputs[i].node_ptr());
    result[i] = (found != grads.end()) ? found->second : zeros_like(inputs[i]);
  }
  return result;
}

}  // namespace dr4sr::ad
