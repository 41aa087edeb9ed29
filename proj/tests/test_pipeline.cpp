#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "dr4sr/pipeline.hpp"

using namespace dr4sr;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PipelineConfig micro_config(const std::string& out_dir) {
  PipelineConfig cfg;
  cfg.data.use_synthetic = true;
  cfg.data.synthetic.num_users = 25;
  cfg.data.synthetic.num_items = 12;
  cfg.data.synthetic.planted_patterns = {{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
  cfg.data.synthetic.noise_rate = 0.2;
  cfg.data.synthetic.patterns_per_user = 3;
  cfg.miner.window_size = 4;
  cfg.miner.support_threshold = 2;
  cfg.miner.max_pattern_len = 3;
  cfg.regen.embed_dim = 8;
  cfg.regen.encoder_layers = 1;
  cfg.regen.decoder_layers = 1;
  cfg.regen.attention_heads = 2;
  cfg.regen.diversity_k = 2;
  cfg.regen.max_src_len = 16;
  cfg.regen.max_pattern_len = 4;
  cfg.regen.batch_size = 32;
  cfg.regen.max_epochs = 2;
  cfg.target.embed_dim = 8;
  cfg.target.layers = 1;
  cfg.target.heads = 2;
  cfg.target.max_len = 16;
  cfg.target.batch_size = 16;
  cfg.target.max_epochs = 2;
  cfg.personalizer.input_dim = 8;
  cfg.personalizer.hidden_dim = 8;
  cfg.bilevel.t_lower = 2;
  cfg.bilevel.dev_fraction = 0.25;
  cfg.bilevel.max_outer_steps = 2;
  cfg.master_seed = 77;
  cfg.out_dir = out_dir;
  cfg.compare_seeds = 2;
  return cfg;
}

fs::path temp_out(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("mine on the worked example produces exactly four patterns") {
  fs::path dir = temp_out("pipe_fig");
  // Write the two-sequence corpus as a dataset file.
  fs::create_directories(dir);
  const fs::path data = dir / "fig.txt";
  {
    std::ofstream out(data, std::ios::binary);
    out << "0 1 2 3 4 5\n1 1 2 3\n";
  }
  PipelineConfig cfg;
  cfg.data.path = data.string();
  cfg.miner.window_size = 3;
  cfg.miner.support_threshold = 2;
  cfg.miner.max_pattern_len = 3;
  cfg.out_dir = (dir / "out").string();

  // leave-one-out keeps (1,2,3) and (1) as training prefixes; mine the raw
  // corpus instead by loading it as regenerated-style data
  Dataset ds = load_dataset(data.string());
  std::vector<Pattern> patterns = mine_patterns(ds, cfg.miner);
  CHECK(patterns.size() == 4);
  fs::remove_all(dir);
}

TEST_CASE("stage chain writes artifacts and re-running is byte-identical") {
  fs::path dir = temp_out("pipe_repro");
  PipelineConfig cfg = micro_config(dir.string());

  const std::vector<std::string> artifacts = {
      "mine/patterns.txt",           "mine/summary.txt",
      "pretrain/regenerator.json",   "pretrain/loss_curve.txt",
      "regenerate/regenerated.txt",  "regenerate/provenance.txt",
      "regenerate/stats.txt",        "train_baseline/report.txt",
      "train_dr4sr_plus/report.txt", "train_dr4sr_plus/bilevel_log.txt",
      "evaluate/report.txt"};

  auto run_chain = [&]() {
    cmd_mine(cfg);
    cmd_pretrain(cfg);
    cmd_regenerate(cfg);
    cmd_train(cfg, "baseline");
    cmd_train(cfg, "dr4sr_plus");
    cmd_evaluate(cfg, (dir / "train_baseline" / "target.json").string());
  };

  run_chain();
  std::map<std::string, std::string> first;
  for (const auto& rel : artifacts) first[rel] = slurp(dir / rel);

  run_chain();
  for (const auto& rel : artifacts)
    CHECK_MESSAGE(slurp(dir / rel) == first[rel], ("artifact differs: " + rel));
  fs::remove_all(dir);
}

TEST_CASE("missing upstream artifacts name the prerequisite command") {
  fs::path dir = temp_out("pipe_missing");
  PipelineConfig cfg = micro_config(dir.string());
  CHECK_THROWS_WITH_AS(cmd_pretrain(cfg), doctest::Contains("dr4sr mine"),
                       MissingArtifactError);
  CHECK_THROWS_WITH_AS(cmd_regenerate(cfg), doctest::Contains("dr4sr pretrain"),
                       MissingArtifactError);
  CHECK_THROWS_WITH_AS(cmd_train(cfg, "dr4sr"), doctest::Contains("dr4sr regenerate"),
                       MissingArtifactError);
  CHECK_THROWS_WITH_AS(cmd_evaluate(cfg, (dir / "nope.json").string()),
                       doctest::Contains("dr4sr train"), MissingArtifactError);
  fs::remove_all(dir);
}

TEST_CASE("unknown variant is rejected") {
  PipelineConfig cfg = micro_config(temp_out("pipe_variant").string());
  CHECK_THROWS_AS(cmd_train(cfg, "fancy"), std::invalid_argument);
}

TEST_CASE("config echo round-trips into identical outputs") {
  fs::path a = temp_out("pipe_echo_a");
  fs::path b = temp_out("pipe_echo_b");
  PipelineConfig cfg = micro_config(a.string());
  cmd_mine(cfg);

  // Rerun from the echoed config, redirected to a second directory.
  PipelineConfig echoed =
      load_config_file((a / "mine" / "config_echo.json").string());
  echoed.out_dir = b.string();
  cmd_mine(echoed);
  CHECK(slurp(a / "mine" / "patterns.txt") == slurp(b / "mine" / "patterns.txt"));
  CHECK(slurp(a / "mine" / "summary.txt") == slurp(b / "mine" / "summary.txt"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("config json round-trip preserves every field") {
  PipelineConfig cfg = micro_config("somewhere");
  cfg.bilevel.hvp_mode = HvpMode::finite_difference;
  cfg.target.kind = TargetKind::recurrent;
  PipelineConfig re = config_from_json(to_json(cfg));
  CHECK(to_json(re) == to_json(cfg));
}


TEST_CASE("max_pattern_len follows window_size when omitted") {
  nlohmann::ordered_json j;
  j["miner"] = {{"window_size", 5}, {"support_threshold", 2}};
  PipelineConfig cfg = config_from_json(j);
  CHECK(cfg.miner.max_pattern_len == 5);

  j["miner"]["max_pattern_len"] = 3;
  cfg = config_from_json(j);
  CHECK(cfg.miner.max_pattern_len == 3);
}

TEST_CASE("dotted overrides") {
  PipelineConfig cfg = micro_config("x");
  apply_override(cfg, "miner.window_size=7");
  CHECK(cfg.miner.window_size == 7);
  apply_override(cfg, "gamma=0.25");
  CHECK(cfg.gamma == doctest::Approx(0.25));
  apply_override(cfg, "target.kind=recurrent");
  CHECK(cfg.target.kind == TargetKind::recurrent);
  apply_override(cfg, "data.synthetic.planted_patterns=[[1,2],[3,4]]");
  REQUIRE(cfg.data.synthetic.planted_patterns.size() == 2);
  CHECK(cfg.data.synthetic.planted_patterns[1] == std::vector<int>{3, 4});
  CHECK_THROWS_AS(apply_override(cfg, "nonsense.key=1"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(cfg, "no_equals"), std::invalid_argument);
}

TEST_CASE("run_all_variants produces reports for the three variants") {
  PipelineConfig cfg = micro_config(temp_out("pipe_variants").string());
  VariantRun run = run_all_variants(cfg, 11);
  for (const MetricReport* r : {&run.baseline, &run.dr4sr, &run.dr4sr_plus}) {
    CHECK(r->get("test_ndcg@10") >= 0.0);
    CHECK(r->get("test_ndcg@10") <= 1.0);
    CHECK(r->get("test_recall@20") >= r->get("test_recall@10"));
  }
  CHECK(run.dr4sr_plus_mean_weight > 0.0);
  CHECK(run.dr4sr_plus_mean_weight < 1.0);
  CHECK(run.plus_weights.size() == run.regenerated.sequences.size());
}

}  // TEST_SUITE
