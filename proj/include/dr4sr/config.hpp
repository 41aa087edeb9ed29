#pragma once

#include <cstdint>
#include <string>

#include "dr4sr/bilevel.hpp"
#include "dr4sr/corpus.hpp"
#include "dr4sr/miner.hpp"
#include "dr4sr/personalizer.hpp"
#include "dr4sr/regenerator.hpp"
#include "dr4sr/target_model.hpp"

#include "json.hpp"

namespace dr4sr {

struct DataSpec {
  std::string path;  // file-based input when non-empty
  bool use_synthetic = false;
  SyntheticSpec synthetic;
  int max_seq_len = 50;
  bool remap_dense = false;
};

// One source of truth for a full pipeline run. Defaults follow the reference
// hyper-parameters: alpha=10, beta=2, K=5, gamma=0.1, d=64, N=50, B=256,
// lr=1e-3, patience=20, T_lower=30, Neumann K=3.
struct PipelineConfig {
  DataSpec data;
  MinerConfig miner;
  RegeneratorConfig regen;
  double gamma = 0.1;
  bool dedupe_regenerated = false;
  bool union_original = false;
  TargetModelConfig target;
  PersonalizerConfig personalizer;
  BilevelConfig bilevel;
  std::uint64_t master_seed = 42;
  std::string out_dir = "out";
  int compare_seeds = 3;
};

nlohmann::ordered_json to_json(const PipelineConfig& cfg);
PipelineConfig config_from_json(const nlohmann::ordered_json& j);
PipelineConfig load_config_file(const std::string& path);

// Dotted-path override, e.g. "miner.window_size=5" or
// "data.synthetic.planted_patterns=[[1,2,3],[4,5,6]]".
void apply_override(PipelineConfig& cfg, const std::string& assignment);

}  // namespace dr4sr
