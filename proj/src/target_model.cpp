#include "dr4sr/target_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dr4sr {

using ad::Matrix;
using ad::Var;

TargetModel::TargetModel(int num_items, const TargetModelConfig& cfg, std::uint64_t seed)
    : num_items_(num_items), cfg_(cfg) {
  if (num_items < 1) throw std::invalid_argument("TargetModel: num_items must be >= 1");
  if (cfg.embed_dim < 1) throw std::invalid_argument("TargetModel: embed_dim must be >= 1");
  if (cfg.patience < 1) throw std::invalid_argument("TargetModel: patience must be >= 1");
  Rng rng(seed);
  item_emb_ = params_.add_normal("item_emb", num_items + 1, cfg.embed_dim, rng, 0.02);
  if (cfg_.kind == TargetKind::attention) {
    pos_emb_ = params_.add_normal("pos_emb", cfg.max_len, cfg.embed_dim, rng, 0.02);
    encoder_ = nn::TransformerStack::create(params_, "enc", cfg.embed_dim, cfg.layers,
                                            cfg.heads, cfg.ffn_mult, rng);
  } else {
    gru_ = nn::GruStack::create(params_, "gru", cfg.embed_dim, cfg.layers, rng);
  }
}

Var TargetModel::hidden_states_graph(const std::vector<int>& items, bool training,
                                     Rng* dropout_rng) const {
  if (items.empty())
    throw std::invalid_argument("hidden_states: empty input sequence");
  std::vector<int> use(items);
  if (static_cast<int>(use.size()) > cfg_.max_len)
    use.erase(use.begin(), use.end() - cfg_.max_len);
  for (int it : use)
    if (it < 1 || it > num_items_)
      throw std::invalid_argument("hidden_states: item id outside vocabulary");

  const int t = static_cast<int>(use.size());
  Var x = ad::gather_rows(item_emb_, use);
  const double rate = training ? cfg_.dropout : 0.0;
  if (cfg_.kind == TargetKind::attention) {
    // Right-aligned position indices: the most recent item always sits at the
    // last trained position, so models trained on short patterns still see
    // familiar indices when scoring long prefixes.
    std::vector<int> pos(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) pos[static_cast<std::size_t>(i)] = cfg_.max_len - t + i;
    x = ad::add(x, ad::gather_rows(pos_emb_, pos));
    x = nn::apply_dropout(x, rate, dropout_rng);
    return encoder_.forward(x, /*causal=*/true, rate, dropout_rng);
  }
  return gru_.forward(x, rate, dropout_rng);
}

Matrix TargetModel::hidden_states(const std::vector<int>& items) const {
  ad::NoTapeGuard guard;
  return hidden_states_graph(items).value();
}

Var TargetModel::next_item_loss_from_hidden(const Var& hidden,
                                            const std::vector<int>& items,
                                            const std::vector<int>& negatives,
                                            const std::vector<ad::Var>& weights) const {
  if (items.size() < 2)
    throw std::invalid_argument("next_item_loss: pattern length must be >= 2");
  const std::size_t positions = items.size() - 1;
  if (negatives.size() != positions)
    throw std::invalid_argument("next_item_loss: need one negative per position");
  if (!weights.empty() && weights.size() != positions)
    throw std::invalid_argument("next_item_loss: weight count mismatch");
  for (int neg : negatives) {
    if (neg < 1 || neg > num_items_)
      throw std::invalid_argument("next_item_loss: negative outside vocabulary");
    if (std::find(items.begin(), items.end(), neg) != items.end())
      throw std::invalid_argument("next_item_loss: negative collides with pattern item");
  }

  std::vector<Var> terms;
  terms.reserve(positions);
  for (std::size_t j = 1; j < items.size(); ++j) {
    Var h_prev = ad::slice_rows(hidden, static_cast<Eigen::Index>(j - 1), 1);
    Var pos_emb = ad::gather_rows(item_emb_, {items[j]});
    Var neg_emb = ad::gather_rows(item_emb_, {negatives[j - 1]});
    Var s_pos = ad::dot(h_prev, pos_emb);
    Var s_neg = ad::dot(h_prev, neg_emb);
    // -log sig(s_pos) = softplus(-s_pos), -log(1 - sig(s_neg)) = softplus(s_neg)
    Var term = ad::add(ad::softplus(ad::neg(s_pos)), ad::softplus(s_neg));
    if (!weights.empty()) term = ad::mul(weights[j - 1], term);
    terms.push_back(term);
  }
  return ad::sum_list(terms);
}

Var TargetModel::next_item_loss_graph(const std::vector<int>& items,
                                      const std::vector<int>& negatives,
                                      const std::vector<ad::Var>& weights,
                                      bool training, Rng* dropout_rng) const {
  Var h = hidden_states_graph(items, training, dropout_rng);
  return next_item_loss_from_hidden(h, items, negatives, weights);
}

double TargetModel::next_item_loss(const std::vector<int>& items,
                                   const std::vector<int>& negatives) const {
  ad::NoTapeGuard guard;
  return next_item_loss_graph(items, negatives, {}).scalar();
}

std::vector<double> TargetModel::score_all_items(const std::vector<int>& prefix) const {
  if (prefix.empty())
    throw std::invalid_argument("score_all_items: prefix must be non-empty");
  ad::NoTapeGuard guard;
  Matrix h = hidden_states_graph(prefix).value();
  const Eigen::VectorXd last = h.row(h.rows() - 1);
  std::vector<double> scores(static_cast<std::size_t>(num_items_));
  for (int i = 1; i <= num_items_; ++i)
    scores[static_cast<std::size_t>(i - 1)] = item_emb_.value().row(i).dot(last);
  return scores;
}

void TargetModel::save(const std::string& path,
                       const nlohmann::ordered_json& config_echo) const {
  nn::save_checkpoint(path, config_echo, params_);
}

void TargetModel::load(const std::string& path) {
  nn::load_checkpoint(path, params_);
}

std::vector<int> sample_negatives(int num_items, const std::vector<int>& items,
                                  Rng& rng) {
  std::vector<bool> in_pattern(static_cast<std::size_t>(num_items + 1), false);
  int distinct = 0;
  for (int it : items) {
    if (!in_pattern[static_cast<std::size_t>(it)]) {
      in_pattern[static_cast<std::size_t>(it)] = true;
      ++distinct;
    }
  }
  if (distinct >= num_items)
    throw std::runtime_error(
        "negative sampling failed: pattern covers the whole vocabulary");
  std::vector<int> negatives(items.size() - 1);
  for (auto& neg : negatives) {
    int candidate = rng.uniform_int(1, num_items);
    while (in_pattern[static_cast<std::size_t>(candidate)])
      candidate = rng.uniform_int(1, num_items);
    neg = candidate;
  }
  return negatives;
}

namespace {

double val_ndcg20(const TargetModel& model, const SplitDataset& split) {
  double sum = 0.0;
  for (const auto& t : split.val_targets) {
    const int rank = rank_of_target(model.score_all_items(t.prefix), t.item);
    sum += ndcg_at_k(rank, 20);
  }
  return sum / static_cast<double>(split.val_targets.size());
}

}  // namespace

TrainStats run_training_loop(TargetModel& model,
                             const std::vector<std::vector<int>>& patterns,
                             const SplitDataset& eval_split, WeightProvider* weights,
                             const TrainHooks* hooks, std::uint64_t seed) {
  if (patterns.empty())
    throw std::invalid_argument("run_training_loop: no training patterns");
  const auto& cfg = model.config();
  Rng rng_inner(derive_seed(seed, "inner"));

  std::vector<Var> theta = model.param_vars();
  nn::AdamOptimizer adam(cfg.learning_rate);

  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < patterns.size(); ++i)
    if (patterns[i].size() >= 2) usable.push_back(i);
  if (usable.empty())
    throw std::invalid_argument("run_training_loop: no pattern of length >= 2");

  TrainStats stats;
  double best_val = -1.0;
  std::vector<Matrix> best_params = model.params().snapshot();
  int since_best = 0;
  std::vector<std::size_t> order = usable;
  bool stop = false;

  for (int epoch = 1; epoch <= cfg.max_epochs && !stop; ++epoch) {
    rng_inner.shuffle(order);
    double epoch_loss = 0.0;
    int epoch_batches = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Var> sample_losses;
      double weight_sum = 0.0;
      long weight_count = 0;
      for (std::size_t b = at; b < end; ++b) {
        const auto& items = patterns[order[b]];
        std::vector<int> negatives = sample_negatives(model.num_items(), items, rng_inner);
        Var h = model.hidden_states_graph(items, /*training=*/true, &rng_inner);
        std::vector<Var> w;
        if (weights != nullptr) {
          w = weights->position_weights(items, h.detach());
          for (const auto& wv : w) {
            weight_sum += wv.value()(0, 0);
            ++weight_count;
          }
        }
        sample_losses.push_back(model.next_item_loss_from_hidden(h, items, negatives, w));
      }
      Var batch_loss =
          ad::scale(ad::sum_list(sample_losses), 1.0 / static_cast<double>(end - at));
      const double loss_value = batch_loss.scalar();
      if (!std::isfinite(loss_value))
        throw TrainingError("training loss became non-finite at epoch " +
                            std::to_string(epoch));
      std::vector<Var> grads = ad::grad(batch_loss, theta);
      std::vector<Matrix> grad_values;
      grad_values.reserve(grads.size());
      for (const auto& g : grads) grad_values.push_back(g.value());
      adam.step(theta, grad_values);

      epoch_loss += loss_value;
      ++epoch_batches;
      ++stats.batches;
      if (hooks != nullptr && hooks->on_batch)
        hooks->on_batch(loss_value,
                        weight_count > 0 ? weight_sum / static_cast<double>(weight_count)
                                         : 1.0);
      if (hooks != nullptr && hooks->t_lower > 0 &&
          stats.batches % hooks->t_lower == 0) {
        ++stats.outer_steps;
        if (hooks->on_outer_step) hooks->on_outer_step(model, stats.outer_steps);
        if (hooks->max_outer_steps > 0 && stats.outer_steps >= hooks->max_outer_steps) {
          stop = true;
          break;
        }
      }
    }
    stats.epochs = epoch;
    stats.final_train_loss = epoch_batches > 0
                                 ? epoch_loss / static_cast<double>(epoch_batches)
                                 : 0.0;

    const double ndcg = val_ndcg20(model, eval_split);
    const bool improved = ndcg > best_val;
    if (improved) {
      best_val = ndcg;
      best_params = model.params().snapshot();
      since_best = 0;
    } else {
      ++since_best;
    }
    if (hooks != nullptr && hooks->on_eval) hooks->on_eval(ndcg, improved);
    if (since_best >= cfg.patience) stop = true;
  }

  model.params().restore(best_params);
  stats.best_val_ndcg = best_val;
  return stats;
}

TargetModel train_target(const Dataset& ds, const SplitDataset& eval_split,
                         const TargetModelConfig& cfg, WeightProvider* weights,
                         std::uint64_t seed, TrainStats* stats) {
  if (ds.sequences.empty()) throw std::invalid_argument("train_target: empty dataset");
  TargetModel model(ds.num_items, cfg, derive_seed(seed, "target-init"));
  std::vector<std::vector<int>> patterns;
  patterns.reserve(ds.sequences.size());
  for (const auto& s : ds.sequences) patterns.push_back(s.items);
  TrainStats st = run_training_loop(model, patterns, eval_split, weights, nullptr, seed);
  if (stats != nullptr) *stats = st;
  return model;
}

MetricReport evaluate(const TargetModel& model, const SplitDataset& split,
                      const std::vector<int>& ks, bool exclude_seen) {
  return evaluate_scores(
      [&model](const std::vector<int>& prefix) { return model.score_all_items(prefix); },
      split, ks, exclude_seen);
}

TargetKind target_kind_from_string(const std::string& s) {
  if (s == "attention") return TargetKind::attention;
  if (s == "recurrent") return TargetKind::recurrent;
  throw std::invalid_argument("unknown target kind: " + s);
}

std::string to_string(TargetKind k) {
  return k == TargetKind::attention ? "attention" : "recurrent";
}

}  // namespace dr4sr
