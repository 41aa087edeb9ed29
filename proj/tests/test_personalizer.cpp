#include "doctest.h"

#include <cmath>

#include "dr4sr/personalizer.hpp"
#include "support/oracles.hpp"

using namespace dr4sr;
using ad::Matrix;
using ad::Var;
using testsupport::fd_grad;
using testsupport::random_matrix;
using testsupport::rel_err;

namespace {

PersonalizerConfig small_cfg(double tau = 1.0) {
  PersonalizerConfig cfg;
  cfg.input_dim = 8;
  cfg.hidden_dim = 8;
  cfg.temperature = tau;
  return cfg;
}

}  // namespace

TEST_SUITE("personalizer") {

TEST_CASE("temperature must be positive") {
  CHECK_THROWS_AS(Personalizer(small_cfg(0.0), 1), std::invalid_argument);
  CHECK_THROWS_AS(Personalizer(small_cfg(-1.0), 1), std::invalid_argument);
}

TEST_CASE("all-zero scorer parameters give w = 0.5") {
  Personalizer p(small_cfg(), 2);
  for (auto& [name, var] : p.params().items()) const_cast<Var&>(var).raw().setZero();
  Rng rng(0);
  const double w = p.score(Matrix::Random(1, 8), /*stochastic=*/false, rng);
  CHECK(w == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("deterministic path equals the temperature-smoothed sigmoid") {
  Rng rng(3);
  for (double tau : {0.5, 1.0, 2.0}) {
    Personalizer p(small_cfg(tau), 7);
    for (int trial = 0; trial < 20; ++trial) {
      Matrix h = random_matrix(1, 8, rng, 1.5);
      const double w = p.score(h, false, rng);
      // recompute z through the same mlp
      ad::NoTapeGuard guard;
      Var hidden = ad::tanh(ad::add(ad::matmul(ad::constant(h), p.params().find("w1")),
                                    p.params().find("b1")));
      Matrix z = ad::add(ad::matmul(hidden, p.params().find("w2")), p.params().find("b2"))
                     .value();
      const double expected = 1.0 / (1.0 + std::exp(-(z(0, 0) - z(0, 1)) / tau));
      CHECK(w == doctest::Approx(expected).epsilon(1e-10));
      CHECK(w > 0.0);
      CHECK(w < 1.0);
    }
  }
}

TEST_CASE("hard-selection limit as temperature goes to zero") {
  Personalizer p(small_cfg(1e-3), 11);
  Rng rng(5);
  // find an input with z1 > z2, then shrink tau
  for (int trial = 0; trial < 10; ++trial) {
    Matrix h = random_matrix(1, 8, rng, 2.0);
    const double w1 = p.score(h, false, rng);
    CHECK((w1 > 0.999 || w1 < 0.001));  // saturated either way
  }
}

TEST_CASE("stochastic mean is one half under symmetric logits") {
  Personalizer p(small_cfg(), 13);
  for (auto& [name, var] : p.params().items()) const_cast<Var&>(var).raw().setZero();
  Rng rng(99);
  const Matrix h = Matrix::Zero(1, 8);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sum += p.score(h, /*stochastic=*/true, rng);
  CHECK(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("gradient of the deterministic score matches finite differences") {
  Rng rng(17);
  for (int instance = 0; instance < 5; ++instance) {
    Personalizer p(small_cfg(), 100 + static_cast<std::uint64_t>(instance));
    Matrix h = random_matrix(1, 8, rng, 1.0);
    auto build = [&]() { return p.score_graph(ad::constant(h), nullptr); };
    std::vector<Var> phi = p.param_vars();
    std::vector<Var> grads = ad::grad(build(), phi);
    for (std::size_t i = 0; i < phi.size(); ++i) {
      Matrix fd = fd_grad([&]() { return build().scalar(); }, phi[i]);
      CHECK(rel_err(grads[i].value(), fd) <= 1e-4);
    }
  }
}

TEST_CASE("position weights align with loss terms and are reproducible") {
  Personalizer p(small_cfg(), 23);
  Rng hrng(1);
  Matrix h = random_matrix(5, 8, hrng, 1.0);  // 5 positions -> 4 weights
  std::vector<Var> w1, w2;
  {
    Rng noise(777);
    w1 = p.position_weights_graph(ad::constant(h), true, &noise);
  }
  {
    Rng noise(777);
    w2 = p.position_weights_graph(ad::constant(h), true, &noise);
  }
  REQUIRE(w1.size() == 4);
  for (std::size_t i = 0; i < w1.size(); ++i) {
    CHECK(w1[i].scalar() == w2[i].scalar());
    CHECK(w1[i].scalar() > 0.0);
    CHECK(w1[i].scalar() < 1.0);
  }
}

TEST_CASE("complementary softmax components sum to one") {
  Personalizer p(small_cfg(), 29);
  Rng rng(31);
  Matrix h = random_matrix(1, 8, rng, 1.0);
  ad::NoTapeGuard guard;
  Var hidden = ad::tanh(ad::add(ad::matmul(ad::constant(h), p.params().find("w1")),
                                p.params().find("b1")));
  Var z = ad::add(ad::matmul(hidden, p.params().find("w2")), p.params().find("b2"));
  Matrix soft = ad::softmax_rows(ad::scale(z, 1.0 / p.config().temperature)).value();
  const double w = p.score(h, false, rng);
  CHECK(soft(0, 0) == doctest::Approx(w).epsilon(1e-12));
  CHECK(soft(0, 0) + soft(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("score_batch over a target model is deterministic per seed") {
  TargetModelConfig tcfg;
  tcfg.kind = TargetKind::attention;
  tcfg.embed_dim = 8;
  tcfg.layers = 1;
  tcfg.heads = 2;
  tcfg.dropout = 0.0;
  tcfg.max_len = 10;
  TargetModel model(9, tcfg, 5);
  Personalizer p(small_cfg(), 37);
  std::vector<std::vector<int>> patterns = {{1, 2, 3}, {4, 5, 6, 7}};
  Rng n1(55), n2(55);
  auto a = score_batch(p, model, patterns, true, &n1);
  auto b = score_batch(p, model, patterns, true, &n2);
  REQUIRE(a.size() == 2);
  CHECK(a[0].size() == 2);
  CHECK(a[1].size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t t = 0; t < a[i].size(); ++t) CHECK(a[i][t] == b[i][t]);
}

}  // TEST_SUITE
