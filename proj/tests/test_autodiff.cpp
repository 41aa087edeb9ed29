#include "doctest.h"

#include <cmath>

#include "dr4sr/autodiff.hpp"
#include "support/oracles.hpp"

using namespace dr4sr;
using ad::Matrix;
using ad::Var;
using testsupport::fd_grad;
using testsupport::random_matrix;
using testsupport::rel_err;

TEST_SUITE("autodiff") {

TEST_CASE("elementwise and matmul values") {
  Matrix a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8;
  CHECK(ad::add(ad::constant(a), ad::constant(b)).value()(0, 1) == 8);
  CHECK(ad::mul(ad::constant(a), ad::constant(b)).value()(1, 1) == 32);
  CHECK(ad::matmul(ad::constant(a), ad::constant(b)).value()(0, 0) == 19);
  CHECK(ad::sum_all(ad::constant(a)).scalar() == 10);
  CHECK(ad::transpose(ad::constant(a)).value()(0, 1) == 3);
}

TEST_CASE("softmax rows sum to one and are invariant to shifts") {
  Rng rng(7);
  Matrix x = random_matrix(3, 5, rng, 3.0);
  Matrix p = ad::softmax_rows(ad::constant(x)).value();
  for (int r = 0; r < 3; ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
  Matrix shifted = x;
  shifted.array() += 100.0;
  Matrix p2 = ad::softmax_rows(ad::constant(shifted)).value();
  CHECK(rel_err(p, p2) < 1e-12);
}

TEST_CASE("gradients of a composite graph match finite differences") {
  Rng rng(11);
  Var w(random_matrix(4, 3, rng, 0.5), true);
  Var b(random_matrix(1, 3, rng, 0.5), true);
  Var gain(Matrix::Ones(1, 3), true);
  Var bias(Matrix::Zero(1, 3), true);
  Matrix x_val = random_matrix(5, 4, rng, 1.0);

  auto build = [&]() {
    Var x = ad::constant(x_val);
    Var h = ad::add(ad::matmul(x, w), ad::broadcast_rows(b, 5));
    Var n = ad::layer_norm_rows(h, gain, bias);
    Var g = ad::gelu(n);
    Var s = ad::softmax_rows(g);
    Var t = ad::tanh(ad::sigmoid(s));
    Var sp = ad::softplus(ad::slice_cols(t, 0, 2));
    return ad::mean_all(ad::mul(sp, sp));
  };

  std::vector<Var> params = {w, b, gain, bias};
  std::vector<Var> grads = ad::grad(build(), params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix fd = fd_grad([&]() { return build().scalar(); }, params[i]);
    CHECK(rel_err(grads[i].value(), fd) < 1e-7);
  }
}

TEST_CASE("gather scatter slice pad concat gradients") {
  Rng rng(13);
  Var emb(random_matrix(6, 3, rng, 0.5), true);
  std::vector<int> idx = {0, 2, 2, 5};

  auto build = [&]() {
    Var g = ad::gather_rows(emb, idx);
    Var s = ad::scatter_rows(g, {1, 0, 3, 3}, 4);
    Var top = ad::slice_rows(s, 0, 2);
    Var padded = ad::pad_rows(top, 5, 2);
    Var c = ad::concat_rows({padded, top});
    Var pc = ad::pad_cols(ad::slice_cols(c, 1, 1), 2, 0);
    return ad::sum_all(ad::mul(pc, pc));
  };

  std::vector<Var> grads = ad::grad(build(), {emb});
  Matrix fd = fd_grad([&]() { return build().scalar(); }, emb);
  CHECK(rel_err(grads[0].value(), fd) < 1e-7);
}

TEST_CASE("gradient is zero for unused inputs") {
  Var a(Matrix::Ones(2, 2), true);
  Var b(Matrix::Ones(3, 1), true);
  Var loss = ad::sum_all(ad::mul(a, a));
  std::vector<Var> grads = ad::grad(loss, {a, b});
  CHECK(grads[1].value().isZero());
  CHECK(grads[0].value()(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("detach cuts the graph") {
  Var a(Matrix::Constant(1, 1, 3.0), true);
  Var d = ad::mul(a, a).detach();
  Var loss = ad::sum_all(ad::mul(d, a));
  std::vector<Var> grads = ad::grad(loss, {a});
  CHECK(grads[0].value()(0, 0) == doctest::Approx(9.0));  // d treated as constant
}

TEST_CASE("sum_list equals sequential addition") {
  Rng rng(3);
  std::vector<Var> terms;
  double expected = 0.0;
  for (int i = 0; i < 17; ++i) {
    double v = rng.normal();
    expected += v;
    terms.push_back(ad::scalar_const(v));
  }
  CHECK(ad::sum_list(terms).scalar() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("double backward: hessian of quadratic form") {
  // L = 0.5 x^T A x has Hessian sym(A); check d/dx (grad . v) = H v.
  Rng rng(17);
  const int n = 4;
  Matrix a_val = random_matrix(n, n, rng);
  Matrix h_true = 0.5 * (a_val + a_val.transpose());
  Var x(random_matrix(n, 1, rng), true);
  Matrix v = random_matrix(n, 1, rng);

  Var loss = ad::scale(
      ad::sum_all(ad::mul(x, ad::matmul(ad::constant(a_val), x))), 0.5);
  std::vector<Var> g = ad::grad(loss, {x}, /*create_graph=*/true);
  Var s = ad::dot(g[0], ad::constant(v));
  std::vector<Var> hv = ad::grad(s, {x});
  CHECK(rel_err(hv[0].value(), h_true * v) < 1e-12);
}

TEST_CASE("double backward through nonlinear composite matches fd of gradient") {
  Rng rng(23);
  Var w(random_matrix(3, 3, rng, 0.6), true);
  Matrix x_val = random_matrix(2, 3, rng);
  auto build = [&]() {
    Var h = ad::tanh(ad::matmul(ad::constant(x_val), w));
    Var s = ad::sigmoid(h);
    return ad::sum_all(ad::mul(s, h));
  };
  Matrix v = random_matrix(3, 3, rng);

  std::vector<Var> g = ad::grad(build(), {w}, /*create_graph=*/true);
  Var s = ad::dot(g[0], ad::constant(v));
  std::vector<Var> hv = ad::grad(s, {w});

  // Finite difference of the analytic gradient along v.
  const double eps = 1e-6;
  Matrix& storage = w.raw();
  Matrix orig = storage;
  storage = orig + eps * v;
  Matrix g_plus = ad::grad(build(), {w})[0].value();
  storage = orig - eps * v;
  Matrix g_minus = ad::grad(build(), {w})[0].value();
  storage = orig;
  Matrix hv_fd = (g_plus - g_minus) / (2.0 * eps);
  CHECK(rel_err(hv[0].value(), hv_fd) < 1e-7);
}

TEST_CASE("retained gradient graph supports repeated backward passes") {
  Var x(Matrix::Constant(1, 1, 2.0), true);
  Var loss = ad::scale(ad::mul(ad::mul(x, x), x), 1.0 / 3.0);  // x^3/3
  std::vector<Var> g = ad::grad(loss, {x}, /*create_graph=*/true);
  CHECK(g[0].scalar() == doctest::Approx(4.0));  // x^2
  for (int rep = 0; rep < 3; ++rep) {
    std::vector<Var> h = ad::grad(g[0], {x});
    CHECK(h[0].scalar() == doctest::Approx(4.0));  // 2x
  }
}

TEST_CASE("no-tape guard yields constant results") {
  Var a(Matrix::Ones(2, 2), true);
  ad::NoTapeGuard guard;
  Var b = ad::mul(a, a);
  CHECK_FALSE(b.requires_grad());
}

TEST_CASE("log softmax matches log of softmax") {
  Rng rng(31);
  Matrix x = random_matrix(4, 6, rng, 2.0);
  Matrix ls = ad::log_softmax_rows(ad::constant(x)).value();
  Matrix s = ad::softmax_rows(ad::constant(x)).value();
  CHECK(rel_err(ls, s.array().log().matrix()) < 1e-10);
}

}  // TEST_SUITE
