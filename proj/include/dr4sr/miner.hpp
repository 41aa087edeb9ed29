#pragma once

#include <string>
#include <vector>

#include "dr4sr/corpus.hpp"

namespace dr4sr {

// Sliding-window pattern extraction. A pattern is an ordered, not
// necessarily contiguous item subsequence whose first and last occurrence
// positions fit inside one window of size `window_size`.
struct MinerConfig {
  int window_size = 10;      // alpha
  int support_threshold = 2; // beta
  int max_pattern_len = 10;  // M, must satisfy 2 <= M <= alpha
  // Default counts at most one occurrence per sequence; when set, counts one
  // occurrence per sliding window instead.
  bool count_occurrences = false;
};

struct Pattern {
  std::vector<int> items;
  int support = 0;
};

struct PretrainPair {
  int sequence_index = 0;
  int pattern_index = 0;
};

void validate(const MinerConfig& cfg);

// Every pattern with support >= threshold, sorted by (length, lexicographic
// items). Patterns of length 1 are never emitted.
std::vector<Pattern> mine_patterns(const Dataset& ds, const MinerConfig& cfg);

// One pair per (sequence, pattern) such that the pattern occurs inside a
// window of that sequence.
std::vector<PretrainPair> build_pretrain_pairs(const Dataset& ds,
                                               const std::vector<Pattern>& patterns,
                                               const MinerConfig& cfg);

// True if `pattern` occurs in `items` with all positions spanning < alpha.
bool occurs_within_window(const std::vector<int>& items,
                          const std::vector<int>& pattern, int alpha);

// Test oracle: exhaustively enumerates position tuples per sequence. Counts
// sequences containing at least one within-window occurrence.
int brute_force_support(const Dataset& ds, const std::vector<int>& pattern, int alpha);

void save_patterns(const std::vector<Pattern>& patterns, const std::string& path);

}  // namespace dr4sr
