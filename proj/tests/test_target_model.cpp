#include "doctest.h"

#include <cmath>

#include "dr4sr/personalizer.hpp"
#include "dr4sr/target_model.hpp"
#include "support/oracles.hpp"

using namespace dr4sr;
using ad::Matrix;
using ad::Var;
using testsupport::fd_grad;
using testsupport::rel_err;

namespace {

TargetModelConfig small_cfg(TargetKind kind) {
  TargetModelConfig cfg;
  cfg.kind = kind;
  cfg.embed_dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.dropout = 0.0;
  cfg.max_len = 12;
  cfg.ffn_mult = 2;
  return cfg;
}

SplitDataset planted_split(int users, int items, double noise, std::uint64_t seed) {
  // Planted patterns cover items 1..9; the vocabulary is strictly larger so
  // negative sampling always has candidates.
  SyntheticSpec spec;
  spec.num_users = users;
  spec.num_items = items;
  spec.planted_patterns = {{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
  spec.noise_rate = noise;
  spec.patterns_per_user = 3;
  return leave_one_out_split(generate_synthetic(spec, seed).dataset);
}

}  // namespace

TEST_SUITE("target_model") {

TEST_CASE("hidden state dimensionality") {
  for (TargetKind kind : {TargetKind::attention, TargetKind::recurrent}) {
    TargetModel model(10, small_cfg(kind), 42);
    Matrix h = model.hidden_states({1, 5, 2, 7});
    CHECK(h.rows() == 4);
    CHECK(h.cols() == 8);
  }
}

TEST_CASE("causality: changing later items leaves earlier states unchanged") {
  for (TargetKind kind : {TargetKind::attention, TargetKind::recurrent}) {
    TargetModel model(10, small_cfg(kind), 43);
    Matrix h1 = model.hidden_states({1, 2, 3, 4, 5});
    Matrix h2 = model.hidden_states({1, 2, 3, 5, 4});
    for (int t = 0; t < 3; ++t)
      CHECK(rel_err(Matrix(h1.row(t)), Matrix(h2.row(t))) < 1e-12);
    CHECK(rel_err(Matrix(h1.row(3)), Matrix(h2.row(3))) > 1e-8);
  }
}

TEST_CASE("attention and recurrent kinds produce different encodings") {
  TargetModel a(10, small_cfg(TargetKind::attention), 44);
  TargetModel b(10, small_cfg(TargetKind::recurrent), 44);
  Matrix ha = a.hidden_states({3, 1, 4, 1, 5});
  Matrix hb = b.hidden_states({3, 1, 4, 1, 5});
  CHECK(rel_err(ha, hb) > 1e-6);
}

TEST_CASE("zero embeddings give the 2 ln 2 per-position loss") {
  TargetModel model(10, small_cfg(TargetKind::attention), 45);
  model.params().find("item_emb").raw().setZero();
  const std::vector<int> pattern = {1, 2, 3};
  const double loss = model.next_item_loss(pattern, {7, 8});
  CHECK(loss == doctest::Approx(2 * 2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("all-zero weights zero the loss and its gradient") {
  TargetModel model(10, small_cfg(TargetKind::attention), 46);
  std::vector<Var> weights = {ad::constant(Matrix::Zero(1, 1)),
                              ad::constant(Matrix::Zero(1, 1))};
  Var loss = model.next_item_loss_graph({1, 2, 3}, {7, 8}, weights);
  CHECK(loss.scalar() == 0.0);
  for (const auto& g : ad::grad(loss, model.param_vars()))
    CHECK(g.value().isZero(0.0));
}

TEST_CASE("all-ones weights equal the unweighted loss exactly") {
  for (TargetKind kind : {TargetKind::attention, TargetKind::recurrent}) {
    TargetModel model(10, small_cfg(kind), 47);
    std::vector<Var> ones = {ad::constant(Matrix::Ones(1, 1)),
                             ad::constant(Matrix::Ones(1, 1)),
                             ad::constant(Matrix::Ones(1, 1))};
    const std::vector<int> pattern = {2, 4, 6, 8};
    const std::vector<int> negatives = {1, 3, 5};
    Var weighted = model.next_item_loss_graph(pattern, negatives, ones);
    Var unweighted = model.next_item_loss_graph(pattern, negatives, {});
    CHECK(weighted.scalar() == unweighted.scalar());
  }
}

TEST_CASE("loss gradients match finite differences for both kinds") {
  for (TargetKind kind : {TargetKind::attention, TargetKind::recurrent}) {
    TargetModel model(6, small_cfg(kind), 48);
    const std::vector<int> pattern = {1, 2, 3, 4};
    const std::vector<int> negatives = {5, 6, 5};
    auto build = [&]() { return model.next_item_loss_graph(pattern, negatives, {}); };
    std::vector<Var> params = model.param_vars();
    std::vector<Var> grads = ad::grad(build(), params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix fd = fd_grad([&]() { return build().scalar(); }, params[i]);
      CHECK(rel_err(grads[i].value(), fd) <= 1e-4);
    }
  }
}

TEST_CASE("negative sampling never collides and detects exhaustion") {
  Rng rng(49);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> pattern = {1, 3, 5};
    std::vector<int> negatives = sample_negatives(6, pattern, rng);
    REQUIRE(negatives.size() == 2);
    for (int n : negatives) {
      CHECK(n >= 1);
      CHECK(n <= 6);
      CHECK(std::find(pattern.begin(), pattern.end(), n) == pattern.end());
    }
  }
  std::vector<int> all = {1, 2, 3};
  CHECK_THROWS_WITH_AS(sample_negatives(3, all, rng),
                       doctest::Contains("vocabulary"), std::runtime_error);
}

TEST_CASE("score_all_items matches a direct dot-product loop") {
  TargetModel model(12, small_cfg(TargetKind::attention), 50);
  const std::vector<int> prefix = {4, 9, 2};
  std::vector<double> scores = model.score_all_items(prefix);
  REQUIRE(scores.size() == 12);
  Matrix h = model.hidden_states(prefix);
  const Eigen::VectorXd last = h.row(h.rows() - 1);
  const Matrix& emb = model.params().find("item_emb").value();
  int argmax = 0;
  double best = -1e300;
  for (int i = 1; i <= 12; ++i) {
    const double s = emb.row(i).dot(last);
    CHECK(scores[static_cast<std::size_t>(i - 1)] == doctest::Approx(s).epsilon(1e-12));
    if (s > best) {
      best = s;
      argmax = i - 1;
    }
  }
  const auto it = std::max_element(scores.begin(), scores.end());
  CHECK(static_cast<int>(it - scores.begin()) == argmax);
}

TEST_CASE("training is deterministic per seed") {
  SplitDataset split = planted_split(12, 12, 0.1, 7);
  TargetModelConfig cfg = small_cfg(TargetKind::attention);
  cfg.max_epochs = 3;
  cfg.batch_size = 8;
  TargetModel a = train_target(split.train, split, cfg, nullptr, 1001);
  TargetModel b = train_target(split.train, split, cfg, nullptr, 1001);
  const auto pa = a.params().snapshot();
  const auto pb = b.params().snapshot();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
}

TEST_CASE("weight_source none equals an all-ones weight provider") {
  SplitDataset split = planted_split(12, 12, 0.1, 8);
  TargetModelConfig cfg = small_cfg(TargetKind::attention);
  cfg.max_epochs = 3;
  cfg.batch_size = 8;
  TargetModel plain = train_target(split.train, split, cfg, nullptr, 2002);
  OnesWeightProvider ones;
  TargetModel weighted = train_target(split.train, split, cfg, &ones, 2002);
  const auto pa = plain.params().snapshot();
  const auto pb = weighted.params().snapshot();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
}

TEST_CASE("trained model beats the popularity baseline on planted data") {
  SplitDataset split = planted_split(30, 12, 0.1, 9);
  TargetModelConfig cfg = small_cfg(TargetKind::attention);
  cfg.max_epochs = 60;
  cfg.patience = 60;
  cfg.batch_size = 16;
  TargetModel model = train_target(split.train, split, cfg, nullptr, 3003);
  MetricReport learned = evaluate(model, split, {10});

  // Popularity baseline: score items by training-set frequency.
  std::vector<double> popularity(12, 0.0);
  for (const auto& s : split.train.sequences)
    for (int item : s.items) popularity[static_cast<std::size_t>(item - 1)] += 1.0;
  MetricReport pop = evaluate_scores(
      [&popularity](const std::vector<int>&) { return popularity; }, split, {10});
  CHECK(learned.get("val_ndcg@10") > pop.get("val_ndcg@10"));
}

TEST_CASE("input validation") {
  TargetModel model(5, small_cfg(TargetKind::attention), 51);
  CHECK_THROWS_AS(model.hidden_states({}), std::invalid_argument);
  CHECK_THROWS_AS(model.hidden_states({0}), std::invalid_argument);
  CHECK_THROWS_AS(model.hidden_states({6}), std::invalid_argument);
  CHECK_THROWS_AS(model.next_item_loss({1}, {}), std::invalid_argument);
  CHECK_THROWS_AS(model.next_item_loss({1, 2}, {2}), std::invalid_argument);
  CHECK_THROWS_AS(model.score_all_items({}), std::invalid_argument);
}

}  // TEST_SUITE
