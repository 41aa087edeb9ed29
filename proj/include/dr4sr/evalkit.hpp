#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dr4sr/corpus.hpp"

namespace dr4sr {

struct MetricReport {
  // Insertion-ordered metric name -> value pairs.
  std::vector<std::pair<std::string, double>> metrics;
  int num_users = 0;

  double get(const std::string& name) const;
  void set(const std::string& name, double value);
};

// 1 + the number of items scoring strictly higher than the target; ties go to
// the smaller item id. Scores are indexed so scores[i] belongs to item i+1.
int rank_of_target(const std::vector<double>& scores, int target_item);

double recall_at_k(int rank, int k);
// Single-relevant-item NDCG: 1/log2(rank+1) inside the cut, 0 outside.
double ndcg_at_k(int rank, int k);

using ScoreFn = std::function<std::vector<double>(const std::vector<int>& prefix)>;

// Mean leave-one-out metrics over users, validation and test variants.
// With exclude_seen, items in the prefix (other than the target) are removed
// from the candidate set. When test_ranks is given it receives one
// (user_id, rank) pair per test target.
MetricReport evaluate_scores(const ScoreFn& score_fn, const SplitDataset& split,
                             const std::vector<int>& ks, bool exclude_seen = false,
                             std::vector<std::pair<int, int>>* test_ranks = nullptr);

void save_report(const MetricReport& report, const std::string& path);
void save_rank_dump(const std::vector<std::pair<int, int>>& ranks,
                    const std::string& path);

}  // namespace dr4sr
