#include "dr4sr/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dr4sr {

using nlohmann::ordered_json;

namespace {

std::string hvp_mode_name(HvpMode m) {
  return m == HvpMode::second_order ? "second_order" : "finite_difference";
}

HvpMode hvp_mode_from_string(const std::string& s) {
  if (s == "second_order") return HvpMode::second_order;
  if (s == "finite_difference") return HvpMode::finite_difference;
  throw std::invalid_argument("unknown hvp_mode: " + s);
}

}  // namespace

ordered_json to_json(const PipelineConfig& cfg) {
  ordered_json j;
  j["data"] = {
      {"path", cfg.data.path},
      {"use_synthetic", cfg.data.use_synthetic},
      {"synthetic",
       {{"num_users", cfg.data.synthetic.num_users},
        {"num_items", cfg.data.synthetic.num_items},
        {"planted_patterns", cfg.data.synthetic.planted_patterns},
        {"noise_rate", cfg.data.synthetic.noise_rate},
        {"patterns_per_user", cfg.data.synthetic.patterns_per_user}}},
      {"max_seq_len", cfg.data.max_seq_len},
      {"remap_dense", cfg.data.remap_dense}};
  j["miner"] = {{"window_size", cfg.miner.window_size},
                {"support_threshold", cfg.miner.support_threshold},
                {"max_pattern_len", cfg.miner.max_pattern_len},
                {"count_occurrences", cfg.miner.count_occurrences}};
  j["regen"] = {{"embed_dim", cfg.regen.embed_dim},
                {"encoder_layers", cfg.regen.encoder_layers},
                {"decoder_layers", cfg.regen.decoder_layers},
                {"attention_heads", cfg.regen.attention_heads},
                {"diversity_k", cfg.regen.diversity_k},
                {"max_src_len", cfg.regen.max_src_len},
                {"max_pattern_len", cfg.regen.max_pattern_len},
                {"ffn_mult", cfg.regen.ffn_mult},
                {"dropout", cfg.regen.dropout},
                {"learning_rate", cfg.regen.learning_rate},
                {"batch_size", cfg.regen.batch_size},
                {"max_epochs", cfg.regen.max_epochs},
                {"patience", cfg.regen.patience},
                {"holdout_fraction", cfg.regen.holdout_fraction},
                {"share_pattern_embeddings", cfg.regen.share_pattern_embeddings},
                {"pool_memory_mean", cfg.regen.pool_memory_mean},
                {"promoter_logit_scale", cfg.regen.promoter_logit_scale},
                {"promoter_entropy_weight", cfg.regen.promoter_entropy_weight}};
  j["gamma"] = cfg.gamma;
  j["dedupe_regenerated"] = cfg.dedupe_regenerated;
  j["union_original"] = cfg.union_original;
  j["target"] = {{"kind", to_string(cfg.target.kind)},
                 {"embed_dim", cfg.target.embed_dim},
                 {"layers", cfg.target.layers},
                 {"heads", cfg.target.heads},
                 {"dropout", cfg.target.dropout},
                 {"max_len", cfg.target.max_len},
                 {"ffn_mult", cfg.target.ffn_mult},
                 {"learning_rate", cfg.target.learning_rate},
                 {"batch_size", cfg.target.batch_size},
                 {"max_epochs", cfg.target.max_epochs},
                 {"patience", cfg.target.patience}};
  j["personalizer"] = {{"input_dim", cfg.personalizer.input_dim},
                       {"hidden_dim", cfg.personalizer.hidden_dim},
                       {"temperature", cfg.personalizer.temperature}};
  j["bilevel"] = {{"t_lower", cfg.bilevel.t_lower},
                  {"neumann_k", cfg.bilevel.neumann_k},
                  {"upper_learning_rate", cfg.bilevel.upper_learning_rate},
                  {"upper_weight_decay", cfg.bilevel.upper_weight_decay},
                  {"dev_fraction", cfg.bilevel.dev_fraction},
                  {"hvp_mode", hvp_mode_name(cfg.bilevel.hvp_mode)},
                  {"fd_scale", cfg.bilevel.fd_scale},
                  {"max_outer_steps", cfg.bilevel.max_outer_steps},
                  {"train_loss_scale", cfg.bilevel.train_loss_scale}};
  j["master_seed"] = cfg.master_seed;
  j["out_dir"] = cfg.out_dir;
  j["compare_seeds"] = cfg.compare_seeds;
  return j;
}

namespace {

template <typename T>
void maybe(const ordered_json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

PipelineConfig config_from_json(const ordered_json& j) {
  PipelineConfig cfg;
  if (j.contains("data")) {
    const auto& d = j.at("data");
    maybe(d, "path", cfg.data.path);
    maybe(d, "use_synthetic", cfg.data.use_synthetic);
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      maybe(s, "num_users", cfg.data.synthetic.num_users);
      maybe(s, "num_items", cfg.data.synthetic.num_items);
      maybe(s, "planted_patterns", cfg.data.synthetic.planted_patterns);
      maybe(s, "noise_rate", cfg.data.synthetic.noise_rate);
      maybe(s, "patterns_per_user", cfg.data.synthetic.patterns_per_user);
    }
    maybe(d, "max_seq_len", cfg.data.max_seq_len);
    maybe(d, "remap_dense", cfg.data.remap_dense);
  }
  if (j.contains("miner")) {
    const auto& m = j.at("miner");
    maybe(m, "window_size", cfg.miner.window_size);
    maybe(m, "support_threshold", cfg.miner.support_threshold);
    if (m.contains("max_pattern_len"))
      cfg.miner.max_pattern_len = m.at("max_pattern_len").get<int>();
    else
      cfg.miner.max_pattern_len = cfg.miner.window_size;  // M defaults to alpha
    maybe(m, "count_occurrences", cfg.miner.count_occurrences);
  }
  if (j.contains("regen")) {
    const auto& r = j.at("regen");
    maybe(r, "embed_dim", cfg.regen.embed_dim);
    maybe(r, "encoder_layers", cfg.regen.encoder_layers);
    maybe(r, "decoder_layers", cfg.regen.decoder_layers);
    maybe(r, "attention_heads", cfg.regen.attention_heads);
    maybe(r, "diversity_k", cfg.regen.diversity_k);
    maybe(r, "max_src_len", cfg.regen.max_src_len);
    maybe(r, "max_pattern_len", cfg.regen.max_pattern_len);
    maybe(r, "ffn_mult", cfg.regen.ffn_mult);
    maybe(r, "dropout", cfg.regen.dropout);
    maybe(r, "learning_rate", cfg.regen.learning_rate);
    maybe(r, "batch_size", cfg.regen.batch_size);
    maybe(r, "max_epochs", cfg.regen.max_epochs);
    maybe(r, "patience", cfg.regen.patience);
    maybe(r, "holdout_fraction", cfg.regen.holdout_fraction);
    maybe(r, "share_pattern_embeddings", cfg.regen.share_pattern_embeddings);
    maybe(r, "pool_memory_mean", cfg.regen.pool_memory_mean);
    maybe(r, "promoter_logit_scale", cfg.regen.promoter_logit_scale);
    maybe(r, "promoter_entropy_weight", cfg.regen.promoter_entropy_weight);
  }
  if (j.contains("gamma")) cfg.gamma = j.at("gamma").get<double>();
  maybe(j, "dedupe_regenerated", cfg.dedupe_regenerated);
  maybe(j, "union_original", cfg.union_original);
  if (j.contains("target")) {
    const auto& t = j.at("target");
    if (t.contains("kind")) cfg.target.kind = target_kind_from_string(t.at("kind"));
    maybe(t, "embed_dim", cfg.target.embed_dim);
    maybe(t, "layers", cfg.target.layers);
    maybe(t, "heads", cfg.target.heads);
    maybe(t, "dropout", cfg.target.dropout);
    maybe(t, "max_len", cfg.target.max_len);
    maybe(t, "ffn_mult", cfg.target.ffn_mult);
    maybe(t, "learning_rate", cfg.target.learning_rate);
    maybe(t, "batch_size", cfg.target.batch_size);
    maybe(t, "max_epochs", cfg.target.max_epochs);
    maybe(t, "patience", cfg.target.patience);
  }
  if (j.contains("personalizer")) {
    const auto& p = j.at("personalizer");
    maybe(p, "input_dim", cfg.personalizer.input_dim);
    maybe(p, "hidden_dim", cfg.personalizer.hidden_dim);
    maybe(p, "temperature", cfg.personalizer.temperature);
  }
  if (j.contains("bilevel")) {
    const auto& b = j.at("bilevel");
    maybe(b, "t_lower", cfg.bilevel.t_lower);
    maybe(b, "neumann_k", cfg.bilevel.neumann_k);
    maybe(b, "upper_learning_rate", cfg.bilevel.upper_learning_rate);
    maybe(b, "upper_weight_decay", cfg.bilevel.upper_weight_decay);
    maybe(b, "dev_fraction", cfg.bilevel.dev_fraction);
    if (b.contains("hvp_mode"))
      cfg.bilevel.hvp_mode = hvp_mode_from_string(b.at("hvp_mode"));
    maybe(b, "fd_scale", cfg.bilevel.fd_scale);
    maybe(b, "max_outer_steps", cfg.bilevel.max_outer_steps);
    maybe(b, "train_loss_scale", cfg.bilevel.train_loss_scale);
  }
  maybe(j, "master_seed", cfg.master_seed);
  maybe(j, "out_dir", cfg.out_dir);
  maybe(j, "compare_seeds", cfg.compare_seeds);
  return cfg;
}

PipelineConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("config file not found: " + path);
  return config_from_json(ordered_json::parse(in));
}

void apply_override(PipelineConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  ordered_json j = to_json(cfg);
  ordered_json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw std::invalid_argument("empty override key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]))
      throw std::invalid_argument("unknown config key: " + key);
    node = &node->at(parts[i]);
  }
  if (!node->contains(parts.back()))
    throw std::invalid_argument("unknown config key: " + key);

  ordered_json parsed;
  try {
    parsed = ordered_json::parse(value);
  } catch (const nlohmann::json::parse_error&) {
    parsed = value;  // plain strings need no quoting
  }
  node->at(parts.back()) = parsed;
  cfg = config_from_json(j);
}

}  // namespace dr4sr
