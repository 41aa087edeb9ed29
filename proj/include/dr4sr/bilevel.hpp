#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dr4sr/autodiff.hpp"
#include "dr4sr/corpus.hpp"
#include "dr4sr/personalizer.hpp"
#include "dr4sr/target_model.hpp"

namespace dr4sr {

enum class HvpMode { second_order, finite_difference };

struct BilevelConfig {
  int t_lower = 30;       // inner steps per outer step
  int neumann_k = 3;      // truncation of the Neumann series
  double upper_learning_rate = 1e-2;  // plain gradient descent on phi
  double upper_weight_decay = 1e-3;
  double dev_fraction = 0.1;
  HvpMode hvp_mode = HvpMode::second_order;
  double fd_scale = 1e-4;
  int max_outer_steps = 1000;
  // Optional rescale of the train loss inside the hypergradient when the
  // Neumann iterates grow; 1.0 leaves it untouched. The exact hypergradient
  // is invariant to this factor, only the truncation behavior changes.
  double train_loss_scale = 1.0;
};

using LossFn = std::function<ad::Var()>;
using MatList = std::vector<ad::Matrix>;

double list_norm(const MatList& v);
double list_inf_norm(const MatList& v);

// Hessian-vector product of a scalar loss at the current parameter values.
// second_order differentiates the gradient graph; finite_difference uses
// central differences of the gradient with
// eps = fd_scale * (1 + |theta|_inf) / |v|_inf.
MatList hvp(const LossFn& loss, const std::vector<ad::Var>& params, const MatList& v,
            HvpMode mode = HvpMode::second_order, double fd_scale = 1e-4);

// p = sum_{n=0}^{K} (I - H)^n v0 via v_{n+1} = v_n - H v_n. Approximates the
// inverse Hessian applied to v0 when the spectrum lies in (0, 2).
MatList neumann_inverse_hvp(const LossFn& loss, const std::vector<ad::Var>& params,
                            const MatList& v0, int k,
                            HvpMode mode = HvpMode::second_order,
                            double fd_scale = 1e-4, int* vjp_passes = nullptr,
                            bool* growth_warning = nullptr);

struct HypergradStats {
  int dev_grad_passes = 0;  // plain gradient of the dev loss
  int vjp_passes = 0;       // gradient-graph build + Neumann + mixed partial
  double v0_norm = 0.0;
  double p_norm = 0.0;
  bool growth_warning = false;
};

// Implicit gradient of the dev loss with respect to phi at the current
// (theta, phi):
//   -grad_theta L_dev . sum_n (I - H_train)^n . grad_phi grad_theta L_train.
MatList hypergradient(const LossFn& train_loss, const LossFn& dev_loss,
                      const std::vector<ad::Var>& theta,
                      const std::vector<ad::Var>& phi, int k,
                      HvpMode mode = HvpMode::second_order, double fd_scale = 1e-4,
                      double train_loss_scale = 1.0,
                      HypergradStats* stats = nullptr);

// Random disjoint split of the regenerated dataset by pattern.
std::pair<Dataset, Dataset> make_dev_split(const Dataset& regen_ds, double dev_fraction,
                                           std::uint64_t seed);

struct BilevelResult {
  TrainStats train_stats;
  // One record per outer step, line-delimited key=value text.
  std::vector<std::string> log_lines;
  double final_mean_weight = 0.0;  // deterministic-path mean over train samples
};

// DR4SR+ engine: t_lower weighted inner steps (Gumbel noise on), then one
// upper step on phi using the implicit hypergradient at the current theta
// (noise off). Inner early stopping matches plain target training.
BilevelResult train_dr4sr_plus(TargetModel& model, Personalizer& personalizer,
                               const Dataset& regen_ds, const SplitDataset& eval_split,
                               const BilevelConfig& cfg, std::uint64_t seed);

// Joint minimization of the weighted loss over (theta, phi) with one
// optimizer; the collapse reference the bi-level loop is compared against.
void train_end_to_end_joint(TargetModel& model, Personalizer& personalizer,
                            const Dataset& regen_ds, int epochs, std::uint64_t seed);

// Deterministic-path (G = 0) mean weight over all loss positions.
double mean_weight(const Personalizer& p, const TargetModel& model,
                   const Dataset& patterns);

}  // namespace dr4sr
