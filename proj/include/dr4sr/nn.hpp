#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dr4sr/autodiff.hpp"
#include "dr4sr/common.hpp"

#include "json.hpp"

namespace dr4sr::nn {

using ad::Matrix;
using ad::Var;

// Named trainable parameters of one model, in creation order. The order is
// part of checkpoint and optimizer state layout.
class ParamSet {
 public:
  Var add_normal(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                 Rng& rng, double stddev);
  Var add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                   double fill);

  std::vector<Var> vars() const;
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  Var find(const std::string& name) const;
  std::size_t size() const { return items_.size(); }

  // Deep copies of every value (snapshot/restore for early stopping).
  std::vector<Matrix> snapshot() const;
  void restore(const std::vector<Matrix>& snap);

  nlohmann::ordered_json to_json() const;
  void load_json(const nlohmann::ordered_json& j);

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8);
  void step(std::vector<Var>& params, const std::vector<Matrix>& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

void sgd_step(std::vector<Var>& params, const std::vector<Matrix>& grads, double lr,
              double weight_decay);

// Multi-head attention: sum over heads of softmax(Q Kt / sqrt(dh)) V Wo_h.
// Weight lists hold one matrix per head (wq/wk/wv: d x dh, wo: dh x d).
Var multi_head_attention(const std::vector<Var>& wq, const std::vector<Var>& wk,
                         const std::vector<Var>& wv, const std::vector<Var>& wo,
                         const Var& queries_in, const Var& keys_in, bool causal);

struct TransformerLayer {
  std::vector<Var> wq, wk, wv, wo;
  Var ln1_g, ln1_b, ln2_g, ln2_b;
  Var w1, b1, w2, b2;
};

// Pre-norm self-attention encoder stack with a final layer norm.
struct TransformerStack {
  int dim = 0;
  int heads = 1;
  std::vector<TransformerLayer> layers;
  Var ln_f_g, ln_f_b;

  static TransformerStack create(ParamSet& ps, const std::string& prefix, int dim,
                                 int n_layers, int heads, int ffn_mult, Rng& rng);
  Var forward(const Var& x, bool causal, double dropout = 0.0,
              Rng* dropout_rng = nullptr) const;
};

struct TransformerDecoderLayer {
  std::vector<Var> self_wq, self_wk, self_wv, self_wo;
  std::vector<Var> cross_wq, cross_wk, cross_wv, cross_wo;
  Var ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
  Var w1, b1, w2, b2;
};

// Pre-norm decoder stack: causal self-attention, cross-attention over an
// encoder memory, feed-forward.
struct TransformerDecoderStack {
  int dim = 0;
  int heads = 1;
  std::vector<TransformerDecoderLayer> layers;
  Var ln_f_g, ln_f_b;

  static TransformerDecoderStack create(ParamSet& ps, const std::string& prefix,
                                        int dim, int n_layers, int heads,
                                        int ffn_mult, Rng& rng);
  Var forward(const Var& x, const Var& memory, double dropout = 0.0,
              Rng* dropout_rng = nullptr) const;
};

struct GruLayer {
  Var wr, wz, wn;  // input maps, d x d
  Var ur, uz, un;  // recurrent maps, d x d
  Var br, bz, bn;  // 1 x d
};

struct GruStack {
  int dim = 0;
  std::vector<GruLayer> layers;

  static GruStack create(ParamSet& ps, const std::string& prefix, int dim,
                         int n_layers, Rng& rng);
  // Causal by construction: output row t depends on input rows 0..t.
  Var forward(const Var& x, double dropout = 0.0, Rng* dropout_rng = nullptr) const;
};

// Elementwise inverted-dropout mask as a constant graph input.
Var apply_dropout(const Var& x, double rate, Rng* rng);

// Checkpoint files: config echo plus named parameter arrays.
void save_checkpoint(const std::string& path, const nlohmann::ordered_json& config_echo,
                     const ParamSet& params);
nlohmann::ordered_json load_checkpoint(const std::string& path, ParamSet& params);

std::string format_double(double v);

}  // namespace dr4sr::nn
