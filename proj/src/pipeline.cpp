#include "dr4sr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dr4sr {

namespace fs = std::filesystem;

std::string stage_dir(const PipelineConfig& cfg, const std::string& stage) {
  fs::path p = fs::path(cfg.out_dir) / stage;
  fs::create_directories(p);
  return p.string();
}

namespace {

void write_config_echo(const PipelineConfig& cfg, const std::string& stage,
                       std::uint64_t stage_seed) {
  nlohmann::ordered_json echo = to_json(cfg);
  echo["stage"] = stage;
  echo["stage_seed"] = stage_seed;
  std::ofstream out(fs::path(stage_dir(cfg, stage)) / "config_echo.json",
                    std::ios::binary);
  out << echo.dump(1) << "\n";
}

std::vector<Pattern> load_patterns_file(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw MissingArtifactError("pattern file not found: " + path +
                               "; run `dr4sr mine` first");
  std::vector<Pattern> patterns;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    Pattern p;
    if (!(ss >> p.support))
      throw ParseError("pattern file line " + std::to_string(line_no) + ": bad support");
    int item;
    while (ss >> item) p.items.push_back(item);
    if (p.items.size() < 2)
      throw ParseError("pattern file line " + std::to_string(line_no) +
                       ": pattern shorter than 2");
    patterns.push_back(std::move(p));
  }
  return patterns;
}

Dataset require_regenerated(const PipelineConfig& cfg) {
  const std::string path =
      (fs::path(cfg.out_dir) / "regenerate" / "regenerated.txt").string();
  if (!fs::exists(path))
    throw MissingArtifactError("regenerated dataset not found: " + path +
                               "; run `dr4sr regenerate` first");
  Dataset regen = load_dataset(path, /*max_len=*/0);
  return regen;
}

nlohmann::ordered_json regen_config_echo(const PipelineConfig& cfg) {
  nlohmann::ordered_json j = to_json(cfg);
  return j;
}

}  // namespace

Dataset pipeline_dataset(const PipelineConfig& cfg) {
  if (!cfg.data.path.empty())
    return load_dataset(cfg.data.path, cfg.data.max_seq_len, cfg.data.remap_dense);
  if (cfg.data.use_synthetic)
    return generate_synthetic(cfg.data.synthetic, derive_seed(cfg.master_seed, "data"))
        .dataset;
  throw std::invalid_argument(
      "config has neither data.path nor data.use_synthetic=true");
}

void cmd_mine(const PipelineConfig& cfg) {
  const std::uint64_t seed = derive_seed(cfg.master_seed, "mine");
  Dataset original = pipeline_dataset(cfg);
  SplitDataset split = leave_one_out_split(original);
  std::vector<Pattern> patterns = mine_patterns(split.train, cfg.miner);
  std::vector<PretrainPair> pairs = build_pretrain_pairs(split.train, patterns, cfg.miner);

  const std::string dir = stage_dir(cfg, "mine");
  save_patterns(patterns, (fs::path(dir) / "patterns.txt").string());
  std::ofstream summary(fs::path(dir) / "summary.txt", std::ios::binary);
  summary << "sequences " << split.train.sequences.size() << '\n'
          << "excluded_short " << split.num_excluded << '\n'
          << "patterns " << patterns.size() << '\n'
          << "pretrain_pairs " << pairs.size() << '\n';
  write_config_echo(cfg, "mine", seed);
}

void cmd_pretrain(const PipelineConfig& cfg) {
  const std::uint64_t seed = derive_seed(cfg.master_seed, "pretrain");
  Dataset original = pipeline_dataset(cfg);
  SplitDataset split = leave_one_out_split(original);
  std::vector<Pattern> patterns =
      load_patterns_file((fs::path(cfg.out_dir) / "mine" / "patterns.txt").string());
  std::vector<PretrainPair> pairs = build_pretrain_pairs(split.train, patterns, cfg.miner);

  Regenerator model(split.train.num_items, cfg.regen, derive_seed(seed, "init"));
  Regenerator::PretrainStats stats = model.pretrain(split.train, patterns, pairs, seed);

  const std::string dir = stage_dir(cfg, "pretrain");
  model.save((fs::path(dir) / "regenerator.json").string(), regen_config_echo(cfg));
  std::ofstream curve(fs::path(dir) / "loss_curve.txt", std::ios::binary);
  for (std::size_t e = 0; e < stats.curve.size(); ++e)
    curve << (e + 1) << ' ' << nn::format_double(stats.curve[e].first) << ' '
          << nn::format_double(stats.curve[e].second) << '\n';
  write_config_echo(cfg, "pretrain", seed);
}

void cmd_regenerate(const PipelineConfig& cfg) {
  const std::uint64_t seed = derive_seed(cfg.master_seed, "regenerate");
  Dataset original = pipeline_dataset(cfg);
  SplitDataset split = leave_one_out_split(original);

  const std::string ckpt = (fs::path(cfg.out_dir) / "pretrain" / "regenerator.json").string();
  if (!fs::exists(ckpt))
    throw MissingArtifactError("regenerator checkpoint not found: " + ckpt +
                               "; run `dr4sr pretrain` first");
  Regenerator model(split.train.num_items, cfg.regen, derive_seed(seed, "init"));
  model.load(ckpt);

  RegeneratedDataset regen = regenerate_dataset(model, split.train, cfg.gamma, seed,
                                                cfg.dedupe_regenerated);

  const std::string dir = stage_dir(cfg, "regenerate");
  save_dataset(regen.dataset, (fs::path(dir) / "regenerated.txt").string());
  save_provenance(regen, (fs::path(dir) / "provenance.txt").string());

  double total_len = 0.0;
  for (const auto& s : regen.dataset.sequences) total_len += static_cast<double>(s.items.size());
  std::ofstream stats(fs::path(dir) / "stats.txt", std::ios::binary);
  stats << "patterns " << regen.dataset.sequences.size() << '\n'
        << "mean_length "
        << nn::format_double(regen.dataset.sequences.empty()
                                 ? 0.0
                                 : total_len / static_cast<double>(
                                                   regen.dataset.sequences.size()))
        << '\n'
        << "source_sequences " << split.train.sequences.size() << '\n';
  write_config_echo(cfg, "regenerate", seed);
}

namespace {

Dataset training_data_for_variant(const PipelineConfig& cfg, const std::string& variant,
                                  const SplitDataset& split) {
  if (variant == "baseline") return split.train;
  Dataset regen = require_regenerated(cfg);
  regen.num_items = split.train.num_items;
  if (cfg.union_original) {
    for (const auto& s : split.train.sequences) {
      Sequence copy = s;
      copy.user_id = static_cast<int>(regen.sequences.size());
      regen.sequences.push_back(std::move(copy));
    }
  }
  return regen;
}

}  // namespace

void cmd_train(const PipelineConfig& cfg, const std::string& variant) {
  if (variant != "baseline" && variant != "dr4sr" && variant != "dr4sr_plus")
    throw std::invalid_argument("unknown variant: " + variant +
                                " (expected baseline|dr4sr|dr4sr_plus)");
  const std::uint64_t seed = derive_seed(cfg.master_seed, "train-" + variant);
  Dataset original = pipeline_dataset(cfg);
  SplitDataset split = leave_one_out_split(original);
  Dataset train_data = training_data_for_variant(cfg, variant, split);

  const std::string dir = stage_dir(cfg, "train_" + variant);
  nlohmann::ordered_json echo = to_json(cfg);
  echo["variant"] = variant;

  MetricReport report;
  if (variant == "dr4sr_plus") {
    TargetModel model(split.train.num_items, cfg.target, derive_seed(seed, "target-init"));
    PersonalizerConfig pcfg = cfg.personalizer;
    pcfg.input_dim = cfg.target.embed_dim;
    Personalizer personalizer(pcfg, derive_seed(seed, "personalizer-init"));
    BilevelResult result =
        train_dr4sr_plus(model, personalizer, train_data, split, cfg.bilevel, seed);
    model.save((fs::path(dir) / "target.json").string(), echo);
    personalizer.save((fs::path(dir) / "personalizer.json").string(), echo);
    std::ofstream log(fs::path(dir) / "bilevel_log.txt", std::ios::binary);
    for (const auto& line : result.log_lines) log << line << '\n';
    // Per-sample scores for inspection, deterministic path.
    std::vector<std::vector<int>> pattern_items;
    for (const auto& s : train_data.sequences)
      if (s.items.size() >= 2) pattern_items.push_back(s.items);
    save_weight_dump(score_batch(personalizer, model, pattern_items, false, nullptr),
                     (fs::path(dir) / "weights.txt").string());
    report = evaluate(model, split, {10, 20});
  } else {
    TargetModel model = train_target(train_data, split, cfg.target, nullptr, seed);
    model.save((fs::path(dir) / "target.json").string(), echo);
    report = evaluate(model, split, {10, 20});
  }
  save_report(report, (fs::path(dir) / "report.txt").string());
  write_config_echo(cfg, "train_" + variant, seed);
}

void cmd_evaluate(const PipelineConfig& cfg, const std::string& checkpoint_path) {
  const std::uint64_t seed = derive_seed(cfg.master_seed, "evaluate");
  if (!fs::exists(checkpoint_path))
    throw MissingArtifactError("target checkpoint not found: " + checkpoint_path +
                               "; run `dr4sr train` first");
  Dataset original = pipeline_dataset(cfg);
  SplitDataset split = leave_one_out_split(original);
  TargetModel model(split.train.num_items, cfg.target, derive_seed(seed, "target-init"));
  model.load(checkpoint_path);
  std::vector<std::pair<int, int>> test_ranks;
  MetricReport report = evaluate_scores(
      [&model](const std::vector<int>& prefix) { return model.score_all_items(prefix); },
      split, {10, 20}, /*exclude_seen=*/false, &test_ranks);
  const std::string dir = stage_dir(cfg, "evaluate");
  save_report(report, (fs::path(dir) / "report.txt").string());
  save_rank_dump(test_ranks, (fs::path(dir) / "test_ranks.txt").string());
  write_config_echo(cfg, "evaluate", seed);
}

VariantRun run_all_variants(const PipelineConfig& cfg, std::uint64_t seed) {
  Dataset original = pipeline_dataset(cfg);
  SplitDataset split = leave_one_out_split(original);

  std::vector<Pattern> patterns = mine_patterns(split.train, cfg.miner);
  std::vector<PretrainPair> pairs = build_pretrain_pairs(split.train, patterns, cfg.miner);

  Regenerator regen_model(split.train.num_items, cfg.regen,
                          derive_seed(seed, "regen-init"));
  regen_model.pretrain(split.train, patterns, pairs, derive_seed(seed, "pretrain"));
  RegeneratedDataset regen = regenerate_dataset(
      regen_model, split.train, cfg.gamma, derive_seed(seed, "regenerate"),
      cfg.dedupe_regenerated);

  VariantRun run;
  run.regenerated = regen.dataset;

  TargetModel baseline =
      train_target(split.train, split, cfg.target, nullptr, derive_seed(seed, "baseline"));
  run.baseline = evaluate(baseline, split, {10, 20});

  Dataset regen_train = regen.dataset;
  regen_train.num_items = split.train.num_items;
  if (cfg.union_original) {
    for (const auto& s : split.train.sequences) {
      Sequence copy = s;
      copy.user_id = static_cast<int>(regen_train.sequences.size());
      regen_train.sequences.push_back(std::move(copy));
    }
  }
  TargetModel dr4sr =
      train_target(regen_train, split, cfg.target, nullptr, derive_seed(seed, "dr4sr"));
  run.dr4sr = evaluate(dr4sr, split, {10, 20});

  TargetModel plus(split.train.num_items, cfg.target, derive_seed(seed, "plus-init"));
  PersonalizerConfig pcfg = cfg.personalizer;
  pcfg.input_dim = cfg.target.embed_dim;
  Personalizer personalizer(pcfg, derive_seed(seed, "personalizer-init"));
  BilevelResult plus_result = train_dr4sr_plus(plus, personalizer, regen_train, split,
                                               cfg.bilevel, derive_seed(seed, "plus"));
  run.dr4sr_plus = evaluate(plus, split, {10, 20});
  run.dr4sr_plus_mean_weight = plus_result.final_mean_weight;

  std::vector<std::vector<int>> regen_patterns;
  for (const auto& s : regen.dataset.sequences) regen_patterns.push_back(s.items);
  run.plus_weights = score_batch(personalizer, plus, regen_patterns,
                                 /*stochastic=*/false, nullptr);
  return run;
}

void cmd_compare(const PipelineConfig& cfg) {
  const std::string dir = stage_dir(cfg, "compare");
  const std::vector<std::string> variants = {"baseline", "dr4sr", "dr4sr_plus"};
  const std::vector<std::string> metric_names = {"test_recall@10", "test_ndcg@10",
                                                 "test_recall@20", "test_ndcg@20"};
  std::vector<std::vector<std::vector<double>>> values(
      variants.size(), std::vector<std::vector<double>>(metric_names.size()));

  for (int s = 0; s < cfg.compare_seeds; ++s) {
    const std::uint64_t seed = derive_seed(cfg.master_seed, "compare", static_cast<std::uint64_t>(s));
    VariantRun run = run_all_variants(cfg, seed);
    const MetricReport* reports[3] = {&run.baseline, &run.dr4sr, &run.dr4sr_plus};
    for (std::size_t v = 0; v < variants.size(); ++v) {
      for (std::size_t m = 0; m < metric_names.size(); ++m)
        values[v][m].push_back(reports[v]->get(metric_names[m]));
      save_report(*reports[v], (fs::path(dir) / ("seed" + std::to_string(s) + "_" +
                                                 variants[v] + "_report.txt"))
                                   .string());
    }
  }

  std::ofstream table(fs::path(dir) / "table.txt", std::ios::binary);
  table << "variant";
  for (const auto& m : metric_names) table << ' ' << m;
  table << '\n';
  for (std::size_t v = 0; v < variants.size(); ++v) {
    table << variants[v];
    for (std::size_t m = 0; m < metric_names.size(); ++m) {
      double mean = 0.0;
      for (double x : values[v][m]) mean += x;
      mean /= static_cast<double>(values[v][m].size());
      double var = 0.0;
      for (double x : values[v][m]) var += (x - mean) * (x - mean);
      var /= static_cast<double>(values[v][m].size());
      table << ' ' << nn::format_double(mean) << "+-"
            << nn::format_double(std::sqrt(var));
    }
    table << '\n';
  }
  write_config_echo(cfg, "compare", derive_seed(cfg.master_seed, "compare"));
}

}  // namespace dr4sr
