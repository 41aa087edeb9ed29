#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <vector>

// Reverse-mode automatic differentiation over dense double matrices.
//
// Backward functions are themselves expressed through the public op set, so
// gradients built with create_graph=true are differentiable again. That is
// what the bi-level engine relies on for exact Hessian-vector products and
// mixed second derivatives.

namespace dr4sr::ad {

using Matrix = Eigen::MatrixXd;

struct Node;

// Handle to a graph node; copying shares the node.
class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const;
  // Mutable access to a leaf's storage, used by optimizers between steps.
  Matrix& raw();
  bool requires_grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

  // A constant view of the same values, cut off from the graph.
  Var detach() const;

  Node* node_ptr() const { return node_.get(); }

 private:
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
  friend Var make_node(Matrix value, std::vector<Var> parents,
                       std::function<std::vector<Var>(const Var&)> backward);
};

struct Node {
  Matrix value;
  bool requires_grad = false;
  std::vector<Var> parents;
  // Maps the upstream gradient to per-parent gradient contributions.
  // Entries may be default-constructed Vars meaning "no gradient".
  std::function<std::vector<Var>(const Var&)> backward;
};

// Taping is on by default; disable it around pure inference for speed.
bool tape_enabled();
class NoTapeGuard {
 public:
  NoTapeGuard();
  ~NoTapeGuard();
  NoTapeGuard(const NoTapeGuard&) = delete;

 private:
  bool prev_;
};
class TapeStateGuard {
 public:
  explicit TapeStateGuard(bool on);
  ~TapeStateGuard();
  TapeStateGuard(const TapeStateGuard&) = delete;

 private:
  bool prev_;
};

Var constant(Matrix m);
Var scalar_const(double v);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var neg(const Var& a);
Var mul(const Var& a, const Var& b);  // elementwise
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

Var sum_all(const Var& a);                       // -> 1x1
Var mean_all(const Var& a);                      // -> 1x1
Var row_sum(const Var& a);                       // r x c -> r x 1
Var col_sum(const Var& a);                       // r x c -> 1 x c
Var broadcast_cols(const Var& a, Eigen::Index cols);    // r x 1 -> r x cols
Var broadcast_rows(const Var& a, Eigen::Index rows);    // 1 x c -> rows x c
Var broadcast_scalar(const Var& a, Eigen::Index rows, Eigen::Index cols);

Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var softplus(const Var& a);  // numerically stable log(1 + exp(x))
Var reciprocal(const Var& a);
Var pow_scalar(const Var& a, double p);

Var gather_rows(const Var& a, const std::vector<int>& idx);
// total_rows x c matrix, zero except rows of `a` added at `idx` (duplicates
// accumulate). Inverse of gather_rows under differentiation.
Var scatter_rows(const Var& a, const std::vector<int>& idx, Eigen::Index total_rows);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index len);
Var pad_rows(const Var& a, Eigen::Index total_rows, Eigen::Index start);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index len);
Var pad_cols(const Var& a, Eigen::Index total_cols, Eigen::Index start);
Var concat_rows(const std::vector<Var>& parts);

Var dot(const Var& a, const Var& b);  // sum(a .* b) -> 1x1
// Balanced pairwise reduction; keeps graphs shallow for long accumulations.
Var sum_list(const std::vector<Var>& terms);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6);
Var gelu(const Var& a);

// Gradient of a scalar `output` with respect to `inputs`. With
// create_graph=true the returned Vars carry history and can be
// differentiated again. Inputs the output does not depend on get zeros.
std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs,
                      bool create_graph = false);

}  // namespace dr4sr::ad
