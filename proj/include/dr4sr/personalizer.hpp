#pragma once

#include <cstdint>
#include <vector>

#include "dr4sr/autodiff.hpp"
#include "dr4sr/nn.hpp"
#include "dr4sr/target_model.hpp"

namespace dr4sr {

struct PersonalizerConfig {
  int input_dim = 64;
  int hidden_dim = 64;
  double temperature = 1.0;  // tau
};

// Per-sample scorer: z = mlp(h), w = softmax((z + G)/tau)[0] with G either
// zero (deterministic path) or sampled Gumbel noise. Inputs are target-model
// hidden states, treated as constants with respect to theta.
class Personalizer {
 public:
  Personalizer(const PersonalizerConfig& cfg, std::uint64_t seed);

  const PersonalizerConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  std::vector<ad::Var> param_vars() const { return params_.vars(); }

  // h must be 1 x input_dim; gumbel_pair points at two noise values or is
  // null for the deterministic path. Returns a 1x1 weight in (0, 1).
  ad::Var score_graph(const ad::Var& h, const double* gumbel_pair) const;
  double score(const ad::Matrix& h, bool stochastic, Rng& rng) const;

  // One weight per loss position (rows 1..T-1 of the hidden matrix), aligned
  // with next_item_loss terms.
  std::vector<ad::Var> position_weights_graph(const ad::Var& hidden_detached,
                                              bool stochastic, Rng* rng) const;

  void save(const std::string& path, const nlohmann::ordered_json& config_echo) const;
  void load(const std::string& path);

 private:
  PersonalizerConfig cfg_;
  nn::ParamSet params_;
  ad::Var w1_, b1_, w2_, b2_;
};

// Weight matrix w[i][t] over whole patterns: one row per pattern, one value
// per position t >= 2, computed from the target model's hidden states.
std::vector<std::vector<double>> score_batch(const Personalizer& p,
                                             const TargetModel& model,
                                             const std::vector<std::vector<int>>& patterns,
                                             bool stochastic, Rng* rng);

void save_weight_dump(const std::vector<std::vector<double>>& weights,
                      const std::string& path);

// WeightProvider adapter used by the training loop. Owns its noise stream so
// the inner loop's randomness is independent of weighting.
class PersonalizerWeightProvider : public WeightProvider {
 public:
  PersonalizerWeightProvider(const Personalizer& p, bool stochastic, std::uint64_t seed)
      : p_(p), stochastic_(stochastic), rng_(seed) {}
  std::vector<ad::Var> position_weights(const std::vector<int>& items,
                                        const ad::Var& h_detached) override;

 private:
  const Personalizer& p_;
  bool stochastic_;
  Rng rng_;
};

// Frozen all-ones weights; makes the weighted loss coincide with the
// unweighted one.
class OnesWeightProvider : public WeightProvider {
 public:
  std::vector<ad::Var> position_weights(const std::vector<int>& items,
                                        const ad::Var& h_detached) override;
};

}  // namespace dr4sr
