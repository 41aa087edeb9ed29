#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dr4sr/common.hpp"

namespace dr4sr {

// One user's ordered interaction history. Item ids are 1-based; 0 is the
// padding id and never appears in a loaded sequence.
struct Sequence {
  int user_id = 0;
  std::vector<int> items;
};

struct Dataset {
  std::vector<Sequence> sequences;
  int num_items = 0;  // vocabulary size V
  std::string name;
};

struct HeldOutTarget {
  int user_id = 0;
  std::vector<int> prefix;
  int item = 0;
};

// Leave-one-out split: per retained user, test target = last item, validation
// target = second-to-last, training sequence = the remainder.
struct SplitDataset {
  Dataset train;
  std::vector<HeldOutTarget> val_targets;   // prefix excludes val and test items
  std::vector<HeldOutTarget> test_targets;  // prefix includes the val item
  int num_excluded = 0;                     // sequences shorter than 3
};

// File format: one user per line, `<user_id> <item_id>...`, space-separated
// decimal integers. Sequences longer than max_len keep their suffix.
Dataset load_dataset(const std::string& path, int max_len = 50,
                     bool remap_dense = false);
void save_dataset(const Dataset& ds, const std::string& path);

SplitDataset leave_one_out_split(const Dataset& ds);

struct SyntheticSpec {
  int num_users = 100;
  int num_items = 20;
  std::vector<std::vector<int>> planted_patterns;
  double noise_rate = 0.1;
  int patterns_per_user = 4;
};

struct SyntheticDataset {
  Dataset dataset;
  // Per sequence, per position: 1 if the item was a noise insertion.
  std::vector<std::vector<std::uint8_t>> noise_mask;
};

// Each sequence concatenates randomly chosen planted patterns; after every
// planted item a uniform noise item is inserted with probability noise_rate.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

}  // namespace dr4sr
