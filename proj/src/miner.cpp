#include "dr4sr/miner.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace dr4sr {

namespace {

struct LenLexLess {
  bool operator()(const std::vector<int>& a, const std::vector<int>& b) const {
    if (a.size() != b.size()) return a.size() < b.size();
    return a < b;
  }
};

using PatternSet = std::set<std::vector<int>>;
using CountMap = std::map<std::vector<int>, int, LenLexLess>;

// All ordered subsequences of items[first..] whose indices stay within
// first + alpha, with length in [2, max_len].
void extend(const std::vector<int>& items, std::size_t first, std::size_t last,
            int alpha, int max_len, std::vector<int>& current, PatternSet& out) {
  const std::size_t limit =
      std::min(items.size(), first + static_cast<std::size_t>(alpha));
  for (std::size_t next = last + 1; next < limit; ++next) {
    current.push_back(items[next]);
    if (current.size() >= 2) out.insert(current);
    if (static_cast<int>(current.size()) < max_len)
      extend(items, first, next, alpha, max_len, current, out);
    current.pop_back();
  }
}

PatternSet sequence_patterns(const std::vector<int>& items, int alpha, int max_len) {
  PatternSet out;
  std::vector<int> current;
  for (std::size_t first = 0; first < items.size(); ++first) {
    current.push_back(items[first]);
    extend(items, first, first, alpha, max_len, current, out);
    current.pop_back();
  }
  return out;
}

// Occurrence-count variant: one count per sliding window containing the
// pattern. Windows are the contiguous spans of length alpha (or the whole
// sequence when shorter).
void count_per_window(const std::vector<int>& items, int alpha, int max_len,
                      CountMap& counts) {
  const std::size_t n = items.size();
  const std::size_t num_windows =
      n > static_cast<std::size_t>(alpha) ? n - static_cast<std::size_t>(alpha) + 1 : 1;
  for (std::size_t w = 0; w < num_windows; ++w) {
    const std::size_t len = std::min(static_cast<std::size_t>(alpha), n - w);
    std::vector<int> window(items.begin() + static_cast<std::ptrdiff_t>(w),
                            items.begin() + static_cast<std::ptrdiff_t>(w + len));
    PatternSet in_window = sequence_patterns(window, alpha, max_len);
    for (const auto& p : in_window) ++counts[p];
  }
}

}  // namespace

void validate(const MinerConfig& cfg) {
  if (cfg.window_size < 2)
    throw std::invalid_argument("miner: window_size must be >= 2");
  if (cfg.support_threshold < 1)
    throw std::invalid_argument("miner: support_threshold must be >= 1");
  if (cfg.max_pattern_len < 2 || cfg.max_pattern_len > cfg.window_size)
    throw std::invalid_argument("miner: max_pattern_len must satisfy 2 <= M <= window_size");
}

std::vector<Pattern> mine_patterns(const Dataset& ds, const MinerConfig& cfg) {
  validate(cfg);
  if (ds.sequences.empty())
    throw std::invalid_argument("mine_patterns: dataset is empty");

  CountMap counts;
  for (const auto& seq : ds.sequences) {
    if (cfg.count_occurrences) {
      count_per_window(seq.items, cfg.window_size, cfg.max_pattern_len, counts);
    } else {
      PatternSet per_seq =
          sequence_patterns(seq.items, cfg.window_size, cfg.max_pattern_len);
      for (const auto& p : per_seq) ++counts[p];
    }
  }

  std::vector<Pattern> out;
  for (const auto& [items, support] : counts) {
    if (support >= cfg.support_threshold) out.push_back(Pattern{items, support});
  }
  return out;
}

bool occurs_within_window(const std::vector<int>& items,
                          const std::vector<int>& pattern, int alpha) {
  if (pattern.empty()) return false;
  const std::size_t n = items.size();
  for (std::size_t start = 0; start < n; ++start) {
    if (items[start] != pattern[0]) continue;
    // Greedy earliest match leaves maximal room, so it is complete.
    const std::size_t limit = std::min(n, start + static_cast<std::size_t>(alpha));
    std::size_t pos = start;
    bool ok = true;
    for (std::size_t q = 1; q < pattern.size(); ++q) {
      std::size_t found = limit;
      for (std::size_t j = pos + 1; j < limit; ++j) {
        if (items[j] == pattern[q]) {
          found = j;
          break;
        }
      }
      if (found == limit) {
        ok = false;
        break;
      }
      pos = found;
    }
    if (ok) return true;
  }
  return false;
}

std::vector<PretrainPair> build_pretrain_pairs(const Dataset& ds,
                                               const std::vector<Pattern>& patterns,
                                               const MinerConfig& cfg) {
  validate(cfg);
  std::vector<PretrainPair> pairs;
  for (std::size_t si = 0; si < ds.sequences.size(); ++si) {
    for (std::size_t pi = 0; pi < patterns.size(); ++pi) {
      if (occurs_within_window(ds.sequences[si].items, patterns[pi].items,
                               cfg.window_size))
        pairs.push_back(PretrainPair{static_cast<int>(si), static_cast<int>(pi)});
    }
  }
  return pairs;
}

namespace {

bool tuple_search(const std::vector<int>& items, const std::vector<int>& pattern,
                  std::size_t item_pos, std::size_t pat_pos, std::size_t first_pos,
                  int alpha) {
  if (pat_pos == pattern.size()) return true;
  for (std::size_t j = item_pos; j < items.size(); ++j) {
    if (pat_pos > 0 &&
        j >= first_pos + static_cast<std::size_t>(alpha))
      break;  // span constraint: last position must stay within the window
    if (items[j] != pattern[pat_pos]) continue;
    const std::size_t first = (pat_pos == 0) ? j : first_pos;
    if (tuple_search(items, pattern, j + 1, pat_pos + 1, first, alpha)) return true;
  }
  return false;
}

}  // namespace

int brute_force_support(const Dataset& ds, const std::vector<int>& pattern, int alpha) {
  if (pattern.size() < 2)
    throw std::invalid_argument("brute_force_support: pattern length must be >= 2");
  int count = 0;
  for (const auto& seq : ds.sequences)
    if (tuple_search(seq.items, pattern, 0, 0, 0, alpha)) ++count;
  return count;
}

void save_patterns(const std::vector<Pattern>& patterns, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write pattern file " + path);
  for (const auto& p : patterns) {
    out << p.support;
    for (int it : p.items) out << ' ' << it;
    out << '\n';
  }
}

}  // namespace dr4sr
