#include "dr4sr/personalizer.hpp"

#include <fstream>
#include <stdexcept>

namespace dr4sr {

using ad::Matrix;
using ad::Var;

Personalizer::Personalizer(const PersonalizerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.temperature <= 0.0)
    throw std::invalid_argument("Personalizer: temperature must be positive");
  if (cfg.input_dim < 1 || cfg.hidden_dim < 1)
    throw std::invalid_argument("Personalizer: dimensions must be positive");
  Rng rng(seed);
  const double std1 = 1.0 / std::sqrt(static_cast<double>(cfg.input_dim));
  const double std2 = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  w1_ = params_.add_normal("w1", cfg.input_dim, cfg.hidden_dim, rng, std1);
  b1_ = params_.add_constant("b1", 1, cfg.hidden_dim, 0.0);
  w2_ = params_.add_normal("w2", cfg.hidden_dim, 2, rng, std2);
  b2_ = params_.add_constant("b2", 1, 2, 0.0);
}

Var Personalizer::score_graph(const Var& h, const double* gumbel_pair) const {
  if (h.rows() != 1 || h.cols() != cfg_.input_dim)
    throw std::invalid_argument("Personalizer::score: input must be 1 x input_dim");
  Var hidden = ad::tanh(ad::add(ad::matmul(h, w1_), b1_));
  Var z = ad::add(ad::matmul(hidden, w2_), b2_);
  if (gumbel_pair != nullptr) {
    Matrix g(1, 2);
    g(0, 0) = gumbel_pair[0];
    g(0, 1) = gumbel_pair[1];
    z = ad::add(z, ad::constant(std::move(g)));
  }
  Var soft = ad::softmax_rows(ad::scale(z, 1.0 / cfg_.temperature));
  return ad::slice_cols(soft, 0, 1);
}

double Personalizer::score(const Matrix& h, bool stochastic, Rng& rng) const {
  ad::NoTapeGuard guard;
  double noise[2];
  const double* noise_ptr = nullptr;
  if (stochastic) {
    noise[0] = rng.gumbel();
    noise[1] = rng.gumbel();
    noise_ptr = noise;
  }
  return score_graph(ad::constant(h), noise_ptr).scalar();
}

std::vector<Var> Personalizer::position_weights_graph(const Var& hidden_detached,
                                                      bool stochastic, Rng* rng) const {
  if (hidden_detached.rows() < 2)
    throw std::invalid_argument("position_weights: need at least two positions");
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(hidden_detached.rows() - 1));
  for (Eigen::Index t = 1; t < hidden_detached.rows(); ++t) {
    Var h_t = ad::slice_rows(hidden_detached, t, 1);
    double noise[2];
    const double* noise_ptr = nullptr;
    if (stochastic) {
      if (rng == nullptr)
        throw std::invalid_argument("position_weights: stochastic scoring needs an rng");
      noise[0] = rng->gumbel();
      noise[1] = rng->gumbel();
      noise_ptr = noise;
    }
    out.push_back(score_graph(h_t, noise_ptr));
  }
  return out;
}

void Personalizer::save(const std::string& path,
                        const nlohmann::ordered_json& config_echo) const {
  nn::save_checkpoint(path, config_echo, params_);
}

void Personalizer::load(const std::string& path) {
  nn::load_checkpoint(path, params_);
}

std::vector<std::vector<double>> score_batch(const Personalizer& p,
                                             const TargetModel& model,
                                             const std::vector<std::vector<int>>& patterns,
                                             bool stochastic, Rng* rng) {
  ad::NoTapeGuard guard;
  std::vector<std::vector<double>> out;
  out.reserve(patterns.size());
  for (const auto& items : patterns) {
    Matrix h = model.hidden_states(items);
    std::vector<Var> w =
        p.position_weights_graph(ad::constant(h), stochastic, rng);
    std::vector<double> row;
    row.reserve(w.size());
    for (const auto& wv : w) row.push_back(wv.scalar());
    out.push_back(std::move(row));
  }
  return out;
}

void save_weight_dump(const std::vector<std::vector<double>>& weights,
                      const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write weight dump " + path);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    // positions are 2-based to align with the loss terms
    for (std::size_t t = 0; t < weights[i].size(); ++t)
      out << i << ' ' << (t + 2) << ' ' << nn::format_double(weights[i][t]) << '\n';
  }
}

std::vector<ad::Var> PersonalizerWeightProvider::position_weights(
    const std::vector<int>& items, const ad::Var& h_detached) {
  (void)items;
  return p_.position_weights_graph(h_detached, stochastic_, &rng_);
}

std::vector<ad::Var> OnesWeightProvider::position_weights(const std::vector<int>& items,
                                                          const ad::Var& h_detached) {
  (void)h_detached;
  std::vector<ad::Var> out;
  out.reserve(items.size() - 1);
  for (std::size_t j = 1; j < items.size(); ++j)
    out.push_back(ad::constant(Matrix::Ones(1, 1)));
  return out;
}

}  // namespace dr4sr
