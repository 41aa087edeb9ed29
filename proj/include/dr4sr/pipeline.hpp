#pragma once

#include <string>
#include <vector>

#include "dr4sr/config.hpp"

namespace dr4sr {

// Orchestration shared by the CLI and the acceptance suite. Every command
// writes its artifacts plus a config-echo file under <out_dir>/<stage>/ and
// is byte-reproducible for a fixed config and master seed.

// Original dataset per the config (file-based or synthetic) and its
// leave-one-out split.
Dataset pipeline_dataset(const PipelineConfig& cfg);

void cmd_mine(const PipelineConfig& cfg);
void cmd_pretrain(const PipelineConfig& cfg);
void cmd_regenerate(const PipelineConfig& cfg);
void cmd_train(const PipelineConfig& cfg, const std::string& variant);
void cmd_evaluate(const PipelineConfig& cfg, const std::string& checkpoint_path);
void cmd_compare(const PipelineConfig& cfg);

// In-memory single-seed run of all three variants; used by cmd_compare and
// the acceptance experiments.
struct VariantRun {
  MetricReport baseline;
  MetricReport dr4sr;
  MetricReport dr4sr_plus;
  double dr4sr_plus_mean_weight = 0.0;
  Dataset regenerated;
  // Personalizer weights on the regenerated patterns after DR4SR+ training
  // (deterministic path), aligned with regenerated.sequences.
  std::vector<std::vector<double>> plus_weights;
};
VariantRun run_all_variants(const PipelineConfig& cfg, std::uint64_t seed);

std::string stage_dir(const PipelineConfig& cfg, const std::string& stage);

}  // namespace dr4sr
