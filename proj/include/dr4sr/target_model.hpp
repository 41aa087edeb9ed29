#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dr4sr/autodiff.hpp"
#include "dr4sr/corpus.hpp"
#include "dr4sr/evalkit.hpp"
#include "dr4sr/nn.hpp"

namespace dr4sr {

enum class TargetKind { attention, recurrent };

struct TargetModelConfig {
  TargetKind kind = TargetKind::attention;
  int embed_dim = 64;
  int layers = 2;
  int heads = 2;
  double dropout = 0.1;
  int max_len = 50;  // N
  int ffn_mult = 2;
  double learning_rate = 1e-3;
  int batch_size = 256;
  int max_epochs = 1000;
  int patience = 20;
};

// A small next-item recommender with tied input/output item embeddings.
// Row t of the hidden-state matrix depends only on items at positions <= t.
class TargetModel {
 public:
  TargetModel(int num_items, const TargetModelConfig& cfg, std::uint64_t seed);

  int num_items() const { return num_items_; }
  const TargetModelConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  std::vector<ad::Var> param_vars() const { return params_.vars(); }

  // Per-position causal encodings as a T x d graph node. Inputs longer than
  // max_len keep their suffix.
  ad::Var hidden_states_graph(const std::vector<int>& items, bool training = false,
                              Rng* dropout_rng = nullptr) const;
  ad::Matrix hidden_states(const std::vector<int>& items) const;

  // Sum over positions t >= 2 of w_t * [ -log sig(h_{t-1} . v_t)
  //                                      - log(1 - sig(h_{t-1} . v_j)) ].
  // `negatives` holds one sampled negative per loss position (size T-1);
  // `weights` may be empty (unweighted) or hold one 1x1 Var per position.
  ad::Var next_item_loss_graph(const std::vector<int>& items,
                               const std::vector<int>& negatives,
                               const std::vector<ad::Var>& weights,
                               bool training = false, Rng* dropout_rng = nullptr) const;
  // Same loss over an already-computed hidden matrix for `items`.
  ad::Var next_item_loss_from_hidden(const ad::Var& hidden,
                                     const std::vector<int>& items,
                                     const std::vector<int>& negatives,
                                     const std::vector<ad::Var>& weights) const;
  double next_item_loss(const std::vector<int>& items,
                        const std::vector<int>& negatives) const;

  // Dot product of the final hidden state with every item embedding. Index i
  // scores item i+1; the padding row is excluded.
  std::vector<double> score_all_items(const std::vector<int>& prefix) const;

  void save(const std::string& path, const nlohmann::ordered_json& config_echo) const;
  void load(const std::string& path);

 private:
  int num_items_;
  TargetModelConfig cfg_;
  nn::ParamSet params_;
  ad::Var item_emb_;  // (V+1) x d including the padding row
  ad::Var pos_emb_;   // max_len x d, attention kind only
  nn::TransformerStack encoder_;
  nn::GruStack gru_;
};

// One uniformly sampled negative per loss position, never colliding with any
// item of the pattern. Throws if the pattern covers the whole vocabulary.
std::vector<int> sample_negatives(int num_items, const std::vector<int>& items,
                                  Rng& rng);

// Supplies per-position loss weights. Implementations own their noise source
// so the inner training stream is untouched by weighting.
class WeightProvider {
 public:
  virtual ~WeightProvider() = default;
  // h_detached is the pattern's T x d hidden matrix, cut from the graph.
  // Returns one 1x1 Var per loss position (size T-1), or empty for
  // unweighted training.
  virtual std::vector<ad::Var> position_weights(const std::vector<int>& items,
                                                const ad::Var& h_detached) = 0;
};

struct TrainHooks {
  int t_lower = 0;        // fire on_outer_step every t_lower batches (0 = never)
  int max_outer_steps = 0;  // stop after this many outer steps (0 = unlimited)
  std::function<void(TargetModel&, int outer_index)> on_outer_step;
  std::function<void(double val_ndcg, bool improved)> on_eval;
  std::function<void(double batch_loss, double batch_mean_weight)> on_batch;
};

struct TrainStats {
  int epochs = 0;
  int batches = 0;
  int outer_steps = 0;
  double best_val_ndcg = 0.0;
  double final_train_loss = 0.0;
};

// Shared mini-batch training driver: Adam on the (optionally weighted)
// next-item loss with NDCG@20 early stopping on the original validation
// split; restores the best parameters. Deterministic per seed.
TrainStats run_training_loop(TargetModel& model,
                             const std::vector<std::vector<int>>& patterns,
                             const SplitDataset& eval_split, WeightProvider* weights,
                             const TrainHooks* hooks, std::uint64_t seed);

// Convenience wrapper constructing and training a model on `ds`.
TargetModel train_target(const Dataset& ds, const SplitDataset& eval_split,
                         const TargetModelConfig& cfg, WeightProvider* weights,
                         std::uint64_t seed, TrainStats* stats = nullptr);

MetricReport evaluate(const TargetModel& model, const SplitDataset& split,
                      const std::vector<int>& ks, bool exclude_seen = false);

TargetKind target_kind_from_string(const std::string& s);
std::string to_string(TargetKind k);

}  // namespace dr4sr
