#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dr4sr/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void attach_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "config file (JSON)");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--set", args.overrides, "override, e.g. miner.window_size=5");
  cmd->add_option("--seed", args.seed, "master seed")->each([&args](const std::string&) {
    args.seed_set = true;
  });
}

dr4sr::PipelineConfig build_config(const CommonArgs& args) {
  dr4sr::PipelineConfig cfg;
  if (!args.config_path.empty()) cfg = dr4sr::load_config_file(args.config_path);
  for (const auto& ov : args.overrides) dr4sr::apply_override(cfg, ov);
  if (args.seed_set) cfg.master_seed = args.seed;
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dataset regeneration pipeline for sequential recommendation"};
  app.require_subcommand(1);

  CommonArgs mine_args, pretrain_args, regen_args, train_args, eval_args, compare_args;
  std::string variant = "baseline";
  std::string checkpoint;

  CLI::App* mine = app.add_subcommand("mine", "extract patterns and pair counts");
  attach_common(mine, mine_args);
  CLI::App* pretrain = app.add_subcommand("pretrain", "pre-train the regenerator");
  attach_common(pretrain, pretrain_args);
  CLI::App* regenerate =
      app.add_subcommand("regenerate", "decode the regenerated dataset");
  attach_common(regenerate, regen_args);
  CLI::App* train = app.add_subcommand("train", "train a target model variant");
  attach_common(train, train_args);
  train->add_option("--variant", variant, "baseline|dr4sr|dr4sr_plus");
  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate a target checkpoint");
  attach_common(evaluate, eval_args);
  evaluate->add_option("--checkpoint", checkpoint, "target checkpoint path")->required();
  CLI::App* compare =
      app.add_subcommand("compare", "run all variants over several seeds");
  attach_common(compare, compare_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (mine->parsed()) dr4sr::cmd_mine(build_config(mine_args));
    if (pretrain->parsed()) dr4sr::cmd_pretrain(build_config(pretrain_args));
    if (regenerate->parsed()) dr4sr::cmd_regenerate(build_config(regen_args));
    if (train->parsed()) dr4sr::cmd_train(build_config(train_args), variant);
    if (evaluate->parsed()) dr4sr::cmd_evaluate(build_config(eval_args), checkpoint);
    if (compare->parsed()) dr4sr::cmd_compare(build_config(compare_args));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
