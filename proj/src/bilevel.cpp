#include "dr4sr/bilevel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dr4sr {

using ad::Matrix;
using ad::Var;

double list_norm(const MatList& v) {
  double s = 0.0;
  for (const auto& m : v) s += m.squaredNorm();
  return std::sqrt(s);
}

double list_inf_norm(const MatList& v) {
  double s = 0.0;
  for (const auto& m : v)
    if (m.size() > 0) s = std::max(s, m.cwiseAbs().maxCoeff());
  return s;
}

namespace {

MatList grad_values(const Var& loss, const std::vector<Var>& params) {
  std::vector<Var> g = ad::grad(loss, params);
  MatList out;
  out.reserve(g.size());
  for (const auto& v : g) out.push_back(v.value());
  return out;
}

bool list_finite(const MatList& v) {
  for (const auto& m : v)
    if (!m.allFinite()) return false;
  return true;
}

// Shifts every parameter leaf by coeff * v in place.
void shift_params(const std::vector<Var>& params, const MatList& v, double coeff) {
  for (std::size_t i = 0; i < params.size(); ++i)
    const_cast<Var&>(params[i]).raw() += coeff * v[i];
}

MatList hvp_second_order_from_grads(const std::vector<Var>& grads_graph,
                                    const std::vector<Var>& params, const MatList& v) {
  std::vector<Var> dots;
  dots.reserve(grads_graph.size());
  for (std::size_t i = 0; i < grads_graph.size(); ++i)
    dots.push_back(ad::dot(grads_graph[i], ad::constant(v[i])));
  Var s = ad::sum_list(dots);
  return grad_values(s, params);
}

}  // namespace

MatList hvp(const LossFn& loss, const std::vector<ad::Var>& params, const MatList& v,
            HvpMode mode, double fd_scale) {
  if (v.size() != params.size()) throw std::invalid_argument("hvp: shape mismatch");
  MatList zeros;
  zeros.reserve(params.size());
  for (const auto& p : params) zeros.push_back(Matrix::Zero(p.rows(), p.cols()));
  const double v_inf = list_inf_norm(v);
  if (v_inf == 0.0) return zeros;

  if (mode == HvpMode::second_order) {
    Var l = loss();
    std::vector<Var> g = ad::grad(l, params, /*create_graph=*/true);
    return hvp_second_order_from_grads(g, params, v);
  }

  std::vector<Var> mutable_params(params);
  const double theta_inf = list_inf_norm([&] {
    MatList vals;
    for (const auto& p : params) vals.push_back(p.value());
    return vals;
  }());
  const double eps = fd_scale * (1.0 + theta_inf) / v_inf;
  shift_params(mutable_params, v, eps);
  MatList g_plus = grad_values(loss(), params);
  shift_params(mutable_params, v, -2.0 * eps);
  MatList g_minus = grad_values(loss(), params);
  shift_params(mutable_params, v, eps);  // restore

  MatList out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    out.push_back((g_plus[i] - g_minus[i]) / (2.0 * eps));
  return out;
}

MatList neumann_inverse_hvp(const LossFn& loss, const std::vector<ad::Var>& params,
                            const MatList& v0, int k, HvpMode mode, double fd_scale,
                            int* vjp_passes, bool* growth_warning) {
  if (k < 0) throw std::invalid_argument("neumann_inverse_hvp: K must be >= 0");
  if (v0.size() != params.size())
    throw std::invalid_argument("neumann_inverse_hvp: shape mismatch");

  int passes = 0;
  bool warned = false;
  MatList v = v0;
  MatList p = v0;

  // In second-order mode the gradient graph is built once and differentiated
  // K times; this is the (K+1)-backward part of the cost claim, the mixed
  // partial in hypergradient() adds one more.
  std::vector<Var> grads_graph;
  if (mode == HvpMode::second_order && k > 0) {
    Var l = loss();
    grads_graph = ad::grad(l, params, /*create_graph=*/true);
    ++passes;
  }

  double prev_norm = list_norm(v);
  for (int n = 0; n < k; ++n) {
    MatList hv;
    if (mode == HvpMode::second_order) {
      hv = hvp_second_order_from_grads(grads_graph, params, v);
      ++passes;
    } else {
      hv = hvp(loss, params, v, HvpMode::finite_difference, fd_scale);
      passes += 2;
    }
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= hv[i];
    if (!list_finite(v))
      throw TrainingError("neumann_inverse_hvp: non-finite iterate at n=" +
                          std::to_string(n + 1));
    const double norm = list_norm(v);
    if (norm > prev_norm * (1.0 + 1e-12)) warned = true;
    prev_norm = norm;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += v[i];
  }
  if (vjp_passes != nullptr) *vjp_passes = passes;
  if (growth_warning != nullptr) *growth_warning = warned;
  return p;
}

MatList hypergradient(const LossFn& train_loss, const LossFn& dev_loss,
                      const std::vector<ad::Var>& theta,
                      const std::vector<ad::Var>& phi, int k, HvpMode mode,
                      double fd_scale, double train_loss_scale,
                      HypergradStats* stats) {
  LossFn scaled_train = train_loss;
  if (train_loss_scale != 1.0)
    scaled_train = [&train_loss, train_loss_scale]() {
      return ad::scale(train_loss(), train_loss_scale);
    };

  HypergradStats local;

  // v0 = grad_theta L_dev, an ordinary first-order gradient.
  MatList v0 = grad_values(dev_loss(), theta);
  local.dev_grad_passes = 1;
  local.v0_norm = list_norm(v0);

  MatList p;
  if (mode == HvpMode::second_order) {
    // Build the train gradient graph once; reuse it for the K Neumann
    // products and the final mixed partial.
    Var l = scaled_train();
    std::vector<Var> g = ad::grad(l, theta, /*create_graph=*/true);
    ++local.vjp_passes;

    MatList v = v0;
    p = v0;
    double prev_norm = list_norm(v);
    for (int n = 0; n < k; ++n) {
      MatList hv = hvp_second_order_from_grads(g, theta, v);
      ++local.vjp_passes;
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= hv[i];
      if (!list_finite(v))
        throw TrainingError("hypergradient: non-finite Neumann iterate at n=" +
                            std::to_string(n + 1));
      const double norm = list_norm(v);
      if (norm > prev_norm * (1.0 + 1e-12)) local.growth_warning = true;
      prev_norm = norm;
      for (std::size_t i = 0; i < p.size(); ++i) p[i] += v[i];
    }
    local.p_norm = list_norm(p);

    // Mixed partial: differentiate (grad_theta L_train . p) with respect to
    // phi, p held constant.
    std::vector<Var> dots;
    dots.reserve(g.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      dots.push_back(ad::dot(g[i], ad::constant(p[i])));
    MatList mixed = grad_values(ad::sum_list(dots), phi);
    ++local.vjp_passes;
    for (auto& m : mixed) m = -m;
    if (stats != nullptr) *stats = local;
    return mixed;
  }

  // Finite-difference route: Neumann with fd HVPs, then the mixed partial as
  // a central difference of grad_phi L_train under theta +- eps*p.
  int neumann_passes = 0;
  p = neumann_inverse_hvp(scaled_train, theta, v0, k, HvpMode::finite_difference,
                          fd_scale, &neumann_passes, &local.growth_warning);
  local.vjp_passes += neumann_passes;
  local.p_norm = list_norm(p);

  const double p_inf = list_inf_norm(p);
  MatList zeros;
  for (const auto& ph : phi) zeros.push_back(Matrix::Zero(ph.rows(), ph.cols()));
  if (p_inf == 0.0) {
    if (stats != nullptr) *stats = local;
    return zeros;
  }
  MatList theta_vals;
  for (const auto& t : theta) theta_vals.push_back(t.value());
  const double eps = fd_scale * (1.0 + list_inf_norm(theta_vals)) / p_inf;

  shift_params(theta, p, eps);
  MatList g_plus = grad_values(scaled_train(), phi);
  shift_params(theta, p, -2.0 * eps);
  MatList g_minus = grad_values(scaled_train(), phi);
  shift_params(theta, p, eps);  // restore
  local.vjp_passes += 2;

  MatList out;
  out.reserve(phi.size());
  for (std::size_t i = 0; i < phi.size(); ++i)
    out.push_back(-(g_plus[i] - g_minus[i]) / (2.0 * eps));
  if (stats != nullptr) *stats = local;
  return out;
}

std::pair<Dataset, Dataset> make_dev_split(const Dataset& regen_ds, double dev_fraction,
                                           std::uint64_t seed) {
  if (dev_fraction <= 0.0 || dev_fraction > 0.5)
    throw std::invalid_argument("make_dev_split: dev_fraction outside (0, 0.5]");
  const std::size_t n = regen_ds.sequences.size();
  const std::size_t dev_count = static_cast<std::size_t>(
      std::floor(dev_fraction * static_cast<double>(n)));
  if (dev_count == 0)
    throw std::invalid_argument("make_dev_split: dataset too small for a dev split");

  // Split by pattern content: all copies of one pattern land on the same
  // side, so a duplicated pattern can never sit in both train and dev.
  std::map<std::vector<int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[regen_ds.sequences[i].items].push_back(i);
  std::vector<const std::vector<std::size_t>*> group_list;
  group_list.reserve(groups.size());
  for (const auto& [items, idxs] : groups) group_list.push_back(&idxs);
  Rng rng(derive_seed(seed, "dev-split"));
  rng.shuffle(group_list);

  std::vector<bool> to_dev(n, false);
  std::size_t assigned = 0;
  for (const auto* group : group_list) {
    if (assigned >= dev_count) break;
    for (std::size_t i : *group) to_dev[i] = true;
    assigned += group->size();
  }

  Dataset train, dev;
  train.num_items = dev.num_items = regen_ds.num_items;
  train.name = regen_ds.name + "-train";
  dev.name = regen_ds.name + "-dev";
  for (std::size_t i = 0; i < n; ++i) {
    if (to_dev[i])
      dev.sequences.push_back(regen_ds.sequences[i]);
    else
      train.sequences.push_back(regen_ds.sequences[i]);
  }
  if (dev.sequences.empty() || train.sequences.empty())
    throw std::invalid_argument("make_dev_split: dataset too small for a dev split");
  return {train, dev};
}

namespace {

std::vector<std::vector<int>> usable_patterns(const Dataset& ds) {
  std::vector<std::vector<int>> out;
  for (const auto& s : ds.sequences)
    if (s.items.size() >= 2) out.push_back(s.items);
  return out;
}

}  // namespace

BilevelResult train_dr4sr_plus(TargetModel& model, Personalizer& personalizer,
                               const Dataset& regen_ds, const SplitDataset& eval_split,
                               const BilevelConfig& cfg, std::uint64_t seed) {
  if (regen_ds.sequences.empty())
    throw std::invalid_argument("train_dr4sr_plus: empty regenerated dataset");
  if (cfg.t_lower < 1) throw std::invalid_argument("train_dr4sr_plus: t_lower must be >= 1");
  if (cfg.neumann_k < 0) throw std::invalid_argument("train_dr4sr_plus: neumann_k must be >= 0");

  auto [train_part, dev_part] = make_dev_split(regen_ds, cfg.dev_fraction, seed);
  std::vector<std::vector<int>> train_patterns = usable_patterns(train_part);
  std::vector<std::vector<int>> dev_patterns = usable_patterns(dev_part);
  if (train_patterns.empty() || dev_patterns.empty())
    throw std::invalid_argument("train_dr4sr_plus: split has no usable patterns");

  PersonalizerWeightProvider provider(personalizer, /*stochastic=*/true,
                                      derive_seed(seed, "gumbel"));
  Rng rng_upper(derive_seed(seed, "upper"));

  std::vector<Var> theta = model.param_vars();
  std::vector<Var> phi = personalizer.param_vars();
  const int batch_size = model.config().batch_size;

  BilevelResult result;
  std::size_t dev_cursor = 0;
  double inner_loss_sum = 0.0;
  double inner_weight_sum = 0.0;
  int inner_batches = 0;
  std::vector<Matrix> best_phi = personalizer.params().snapshot();

  TrainHooks hooks;
  hooks.t_lower = cfg.t_lower;
  hooks.max_outer_steps = cfg.max_outer_steps;
  hooks.on_batch = [&](double loss, double weight) {
    inner_loss_sum += loss;
    inner_weight_sum += weight;
    ++inner_batches;
  };
  hooks.on_eval = [&](double, bool improved) {
    if (improved) best_phi = personalizer.params().snapshot();
  };
  hooks.on_outer_step = [&](TargetModel& m, int outer_index) {
    // Round-robin dev batch (Gumbel noise off: the dev loss is unweighted).
    std::vector<std::size_t> dev_batch;
    for (int i = 0; i < batch_size && i < static_cast<int>(dev_patterns.size()); ++i) {
      dev_batch.push_back(dev_cursor);
      dev_cursor = (dev_cursor + 1) % dev_patterns.size();
    }
    // Independent train batch for the implicit-gradient terms.
    std::vector<std::size_t> hyper_batch;
    for (int i = 0; i < batch_size && i < static_cast<int>(train_patterns.size()); ++i)
      hyper_batch.push_back(static_cast<std::size_t>(
          rng_upper.uniform_int(0, static_cast<int>(train_patterns.size()) - 1)));

    std::vector<std::vector<int>> dev_negatives, hyper_negatives;
    for (std::size_t idx : dev_batch)
      dev_negatives.push_back(sample_negatives(m.num_items(), dev_patterns[idx], rng_upper));
    for (std::size_t idx : hyper_batch)
      hyper_negatives.push_back(
          sample_negatives(m.num_items(), train_patterns[idx], rng_upper));

    LossFn dev_loss = [&]() {
      std::vector<Var> losses;
      for (std::size_t i = 0; i < dev_batch.size(); ++i)
        losses.push_back(m.next_item_loss_graph(dev_patterns[dev_batch[i]],
                                                dev_negatives[i], {}));
      return ad::scale(ad::sum_list(losses), 1.0 / static_cast<double>(losses.size()));
    };
    LossFn train_loss = [&]() {
      std::vector<Var> losses;
      for (std::size_t i = 0; i < hyper_batch.size(); ++i) {
        const auto& items = train_patterns[hyper_batch[i]];
        Var h = m.hidden_states_graph(items);
        std::vector<Var> w =
            personalizer.position_weights_graph(h.detach(), /*stochastic=*/false, nullptr);
        losses.push_back(m.next_item_loss_from_hidden(h, items, hyper_negatives[i], w));
      }
      return ad::scale(ad::sum_list(losses), 1.0 / static_cast<double>(losses.size()));
    };

    HypergradStats stats;
    MatList hg = hypergradient(train_loss, dev_loss, theta, phi, cfg.neumann_k,
                               cfg.hvp_mode, cfg.fd_scale, cfg.train_loss_scale, &stats);
    if (!list_finite(hg))
      throw TrainingError("train_dr4sr_plus: non-finite hypergradient (|v0|=" +
                          std::to_string(stats.v0_norm) +
                          ", |p|=" + std::to_string(stats.p_norm) + ")");
    const double dev_loss_value = [&]() {
      ad::NoTapeGuard guard;
      return dev_loss().scalar();
    }();
    nn::sgd_step(phi, hg, cfg.upper_learning_rate, cfg.upper_weight_decay);

    std::ostringstream line;
    line << "outer=" << outer_index
         << " inner_loss=" << nn::format_double(
                inner_batches > 0 ? inner_loss_sum / inner_batches : 0.0)
         << " dev_loss=" << nn::format_double(dev_loss_value)
         << " hypergrad_norm=" << nn::format_double(list_norm(hg))
         << " mean_weight=" << nn::format_double(
                inner_batches > 0 ? inner_weight_sum / inner_batches : 0.0)
         << " vjp_passes=" << stats.vjp_passes
         << " dev_grad_passes=" << stats.dev_grad_passes;
    if (stats.growth_warning) line << " neumann_growth_warning=1";
    result.log_lines.push_back(line.str());
    inner_loss_sum = 0.0;
    inner_weight_sum = 0.0;
    inner_batches = 0;
  };

  result.train_stats =
      run_training_loop(model, train_patterns, eval_split, &provider, &hooks, seed);
  personalizer.params().restore(best_phi);
  result.final_mean_weight = mean_weight(personalizer, model, regen_ds);
  return result;
}

void train_end_to_end_joint(TargetModel& model, Personalizer& personalizer,
                            const Dataset& regen_ds, int epochs, std::uint64_t seed) {
  std::vector<std::vector<int>> patterns = usable_patterns(regen_ds);
  if (patterns.empty())
    throw std::invalid_argument("train_end_to_end_joint: no usable patterns");

  Rng rng(derive_seed(seed, "joint"));
  Rng rng_noise(derive_seed(seed, "joint-gumbel"));
  std::vector<Var> all_params = model.param_vars();
  for (const auto& v : personalizer.param_vars()) all_params.push_back(v);
  nn::AdamOptimizer adam(model.config().learning_rate);
  const int batch_size = model.config().batch_size;

  std::vector<std::size_t> order(patterns.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
      const std::size_t end =
          std::min(order.size(), at + static_cast<std::size_t>(batch_size));
      std::vector<Var> losses;
      for (std::size_t i = at; i < end; ++i) {
        const auto& items = patterns[order[i]];
        std::vector<int> negatives = sample_negatives(model.num_items(), items, rng);
        Var h = model.hidden_states_graph(items, /*training=*/true, &rng);
        std::vector<Var> w = personalizer.position_weights_graph(
            h.detach(), /*stochastic=*/true, &rng_noise);
        losses.push_back(model.next_item_loss_from_hidden(h, items, negatives, w));
      }
      Var loss = ad::scale(ad::sum_list(losses), 1.0 / static_cast<double>(end - at));
      if (!std::isfinite(loss.scalar()))
        throw TrainingError("end-to-end training diverged at epoch " +
                            std::to_string(epoch));
      std::vector<Var> grads = ad::grad(loss, all_params);
      MatList grad_values_list;
      for (const auto& g : grads) grad_values_list.push_back(g.value());
      adam.step(all_params, grad_values_list);
    }
  }
}

double mean_weight(const Personalizer& p, const TargetModel& model,
                   const Dataset& patterns) {
  ad::NoTapeGuard guard;
  double sum = 0.0;
  long count = 0;
  for (const auto& s : patterns.sequences) {
    if (s.items.size() < 2) continue;
    Matrix h = model.hidden_states(s.items);
    std::vector<Var> w = p.position_weights_graph(ad::constant(h), false, nullptr);
    for (const auto& wv : w) {
      sum += wv.scalar();
      ++count;
    }
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace dr4sr
