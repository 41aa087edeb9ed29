#include "dr4sr/evalkit.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "dr4sr/nn.hpp"

namespace dr4sr {

double MetricReport::get(const std::string& name) const {
  for (const auto& [n, v] : metrics)
    if (n == name) return v;
  throw std::invalid_argument("MetricReport: no metric named " + name);
}

void MetricReport::set(const std::string& name, double value) {
  for (auto& [n, v] : metrics) {
    if (n == name) {
      v = value;
      return;
    }
  }
  metrics.emplace_back(name, value);
}

int rank_of_target(const std::vector<double>& scores, int target_item) {
  const int v = static_cast<int>(scores.size());
  if (target_item < 1 || target_item > v)
    throw std::invalid_argument("rank_of_target: target item out of range");
  const double target_score = scores[static_cast<std::size_t>(target_item - 1)];
  int rank = 1;
  for (int i = 0; i < v; ++i) {
    const double s = scores[static_cast<std::size_t>(i)];
    if (s > target_score) ++rank;
    else if (s == target_score && i + 1 < target_item) ++rank;
  }
  return rank;
}

double recall_at_k(int rank, int k) {
  if (rank < 1 || k < 1) throw std::invalid_argument("recall_at_k: rank and k must be >= 1");
  return rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(int rank, int k) {
  if (rank < 1 || k < 1) throw std::invalid_argument("ndcg_at_k: rank and k must be >= 1");
  if (rank > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

namespace {

void accumulate(const ScoreFn& score_fn, const std::vector<HeldOutTarget>& targets,
                const std::vector<int>& ks, bool exclude_seen,
                const std::string& prefix_name, MetricReport& report,
                std::vector<std::pair<int, int>>* rank_out) {
  std::vector<double> recall(ks.size(), 0.0), ndcg(ks.size(), 0.0);
  for (const auto& t : targets) {
    std::vector<double> scores = score_fn(t.prefix);
    if (exclude_seen) {
      for (int item : t.prefix)
        if (item != t.item)
          scores[static_cast<std::size_t>(item - 1)] =
              -std::numeric_limits<double>::infinity();
    }
    const int rank = rank_of_target(scores, t.item);
    if (rank_out != nullptr) rank_out->emplace_back(t.user_id, rank);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      recall[i] += recall_at_k(rank, ks[i]);
      ndcg[i] += ndcg_at_k(rank, ks[i]);
    }
  }
  const double n = static_cast<double>(targets.size());
  for (std::size_t i = 0; i < ks.size(); ++i) {
    report.set(prefix_name + "_recall@" + std::to_string(ks[i]), recall[i] / n);
    report.set(prefix_name + "_ndcg@" + std::to_string(ks[i]), ndcg[i] / n);
  }
}

}  // namespace

MetricReport evaluate_scores(const ScoreFn& score_fn, const SplitDataset& split,
                             const std::vector<int>& ks, bool exclude_seen,
                             std::vector<std::pair<int, int>>* test_ranks) {
  if (split.val_targets.empty() || split.test_targets.empty())
    throw std::invalid_argument("evaluate_scores: empty split");
  MetricReport report;
  report.num_users = static_cast<int>(split.test_targets.size());
  accumulate(score_fn, split.val_targets, ks, exclude_seen, "val", report, nullptr);
  accumulate(score_fn, split.test_targets, ks, exclude_seen, "test", report,
             test_ranks);
  return report;
}

void save_rank_dump(const std::vector<std::pair<int, int>>& ranks,
                    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write rank dump " + path);
  for (const auto& [user, rank] : ranks) out << user << ' ' << rank << '\n';
}

void save_report(const MetricReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report file " + path);
  out << "num_users " << report.num_users << '\n';
  for (const auto& [name, value] : report.metrics)
    out << name << ' ' << nn::format_double(value) << '\n';
}

}  // namespace dr4sr
