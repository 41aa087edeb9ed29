#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dr4sr/autodiff.hpp"
#include "dr4sr/corpus.hpp"
#include "dr4sr/miner.hpp"
#include "dr4sr/nn.hpp"

namespace dr4sr {

struct RegeneratorConfig {
  int embed_dim = 64;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int attention_heads = 2;
  int diversity_k = 5;     // number of memory spaces
  int max_src_len = 50;    // L
  int max_pattern_len = 10;
  int ffn_mult = 2;
  double dropout = 0.0;
  double learning_rate = 1e-3;
  int batch_size = 256;
  int max_epochs = 200;
  int patience = 10;
  double holdout_fraction = 0.1;
  bool share_pattern_embeddings = true;
  // When set, encoder output is mean-pooled to a single vector before the
  // memory projections, recovering the single-vector memory reading.
  bool pool_memory_mean = false;
  // Multiplier on the promoter logits before the softmax. Values above 1
  // push the routing toward one memory space per pattern, which keeps
  // decoding from a single raw memory close to the training distribution.
  double promoter_logit_scale = 1.0;
  // Weight of the routing-entropy penalty added to the pre-training
  // objective (0 disables it, leaving the plain reconstruction objective).
  // Inference conditions the decoder on one raw memory at a time, so sharp
  // routing keeps that in-distribution; the reconstruction loss alone only
  // separates mixtures. Small corpora benefit from values around 0.1.
  double promoter_entropy_weight = 0.0;
};

// K projected memory sequences, one vector per source position.
struct MemoryBank {
  std::vector<ad::Var> memories;
};

// Sequence-to-pattern encoder-decoder with K projected memory spaces and a
// pattern-conditioned router that mixes them, trained to reconstruct mined
// patterns from their source sequences.
class Regenerator {
 public:
  Regenerator(int num_items, const RegeneratorConfig& cfg, std::uint64_t seed);

  int num_items() const { return num_items_; }
  const RegeneratorConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  std::vector<ad::Var> param_vars() const { return params_.vars(); }

  int pad_token() const { return 0; }
  int bos_token() const { return num_items_ + 1; }
  int eos_token() const { return num_items_ + 2; }
  int vocab_size() const { return num_items_ + 3; }

  MemoryBank encode(const std::vector<int>& seq) const;

  // Probability vector over the K memory spaces for a gold pattern,
  // K x 1, positive, summing to one.
  ad::Var promote(const std::vector<int>& pattern) const;

  // Position-wise convex combination of the K memories under pi.
  static ad::Var mix_memories(const MemoryBank& bank, const ad::Var& pi);

  // Mean per-token negative log-likelihood of the gold patterns under
  // teacher forcing, decoder conditioned on the promoted memory mix.
  ad::Var reconstruction_loss_graph(const Dataset& ds,
                                    const std::vector<Pattern>& patterns,
                                    const std::vector<PretrainPair>& batch) const;
  double reconstruction_loss(const Dataset& ds, const std::vector<Pattern>& patterns,
                             const std::vector<PretrainPair>& batch) const;

  // Mean entropy of the routing distribution over the batch's patterns;
  // the sharpening term of the pre-training objective.
  ad::Var routing_entropy_graph(const std::vector<Pattern>& patterns,
                                const std::vector<PretrainPair>& batch) const;

  struct PretrainStats {
    int epochs = 0;
    double final_train_loss = 0.0;
    double final_holdout_loss = 0.0;
    // per-epoch (train loss, holdout loss); holdout is NaN when empty
    std::vector<std::pair<double, double>> curve;
  };
  PretrainStats pretrain(const Dataset& ds, const std::vector<Pattern>& patterns,
                         const std::vector<PretrainPair>& pairs, std::uint64_t seed);

  struct DecodedPattern {
    std::vector<int> items;
    int memory_index = 0;
  };

  // Greedy hybrid decoding: per step, generative mode with probability gamma
  // (whole vocabulary) else restrictive mode (items of seq only); EOS always
  // allowed, BOS and PAD never. Patterns shorter than 2 are dropped and
  // duplicates among the K decodes collapse to one.
  std::vector<DecodedPattern> regenerate_sequence(const std::vector<int>& seq,
                                                  double gamma, Rng& rng) const;

  void save(const std::string& path, const nlohmann::ordered_json& config_echo) const;
  void load(const std::string& path);

 private:
  ad::Var decoder_logits(const std::vector<int>& decoder_tokens,
                         const ad::Var& memory) const;
  ad::Var pattern_summary(const std::vector<int>& pattern) const;
  ad::Var pretrain_loss_graph(const Dataset& ds, const std::vector<Pattern>& patterns,
                              const std::vector<PretrainPair>& batch,
                              ad::Var* routing_entropy) const;

  int num_items_;
  RegeneratorConfig cfg_;
  nn::ParamSet params_;
  ad::Var token_emb_;    // (V+3) x d
  ad::Var pattern_emb_;  // separate table when embeddings are not shared
  ad::Var enc_pos_;      // max_src_len x d
  ad::Var dec_pos_;      // (max_pattern_len + 1) x d
  ad::Var pat_pos_;      // max_pattern_len x d
  nn::TransformerStack encoder_;
  nn::TransformerStack pattern_encoder_;
  std::vector<ad::Var> memory_proj_;  // K maps, d x d
  ad::Var prom_w1_, prom_b1_, prom_w2_, prom_b2_;
  nn::TransformerDecoderStack decoder_;
  ad::Var out_proj_, out_bias_;
};

struct RegeneratedDataset {
  Dataset dataset;  // one pattern per sequence, user_id = line index
  struct Provenance {
    int source_user = 0;
    int memory_index = 0;
  };
  std::vector<Provenance> provenance;
};

RegeneratedDataset regenerate_dataset(const Regenerator& model, const Dataset& ds,
                                      double gamma, std::uint64_t seed,
                                      bool global_dedupe = false);

void save_provenance(const RegeneratedDataset& regen, const std::string& path);

}  // namespace dr4sr
