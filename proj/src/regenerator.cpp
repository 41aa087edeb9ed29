#include "dr4sr/regenerator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace dr4sr {

using ad::Matrix;
using ad::Var;

Regenerator::Regenerator(int num_items, const RegeneratorConfig& cfg, std::uint64_t seed)
    : num_items_(num_items), cfg_(cfg) {
  if (num_items < 1) throw std::invalid_argument("Regenerator: num_items must be >= 1");
  if (cfg.diversity_k < 1) throw std::invalid_argument("Regenerator: diversity_k must be >= 1");
  if (cfg.embed_dim < 1) throw std::invalid_argument("Regenerator: embed_dim must be >= 1");
  Rng rng(seed);
  const int d = cfg.embed_dim;
  const double std_d = 1.0 / std::sqrt(static_cast<double>(d));
  token_emb_ = params_.add_normal("token_emb", vocab_size(), d, rng, 0.02);
  if (!cfg.share_pattern_embeddings)
    pattern_emb_ = params_.add_normal("pattern_emb", vocab_size(), d, rng, 0.02);
  enc_pos_ = params_.add_normal("enc_pos", cfg.max_src_len, d, rng, 0.02);
  dec_pos_ = params_.add_normal("dec_pos", cfg.max_pattern_len + 1, d, rng, 0.02);
  pat_pos_ = params_.add_normal("pat_pos", cfg.max_pattern_len, d, rng, 0.02);
  encoder_ = nn::TransformerStack::create(params_, "enc", d, cfg.encoder_layers,
                                          cfg.attention_heads, cfg.ffn_mult, rng);
  pattern_encoder_ = nn::TransformerStack::create(params_, "pat", d, cfg.encoder_layers,
                                                  cfg.attention_heads, cfg.ffn_mult, rng);
  for (int k = 0; k < cfg.diversity_k; ++k)
    memory_proj_.push_back(
        params_.add_normal("mem_proj." + std::to_string(k), d, d, rng, std_d));
  prom_w1_ = params_.add_normal("prom.w1", d, d, rng, std_d);
  prom_b1_ = params_.add_constant("prom.b1", 1, d, 0.0);
  prom_w2_ = params_.add_normal("prom.w2", d, cfg.diversity_k, rng, std_d);
  prom_b2_ = params_.add_constant("prom.b2", 1, cfg.diversity_k, 0.0);
  decoder_ = nn::TransformerDecoderStack::create(params_, "dec", d, cfg.decoder_layers,
                                                 cfg.attention_heads, cfg.ffn_mult, rng);
  out_proj_ = params_.add_normal("out_proj", d, vocab_size(), rng, std_d);
  out_bias_ = params_.add_constant("out_bias", 1, vocab_size(), 0.0);
}

MemoryBank Regenerator::encode(const std::vector<int>& seq) const {
  if (seq.empty()) throw std::invalid_argument("encode: empty sequence");
  std::vector<int> use(seq);
  if (static_cast<int>(use.size()) > cfg_.max_src_len)
    use.erase(use.begin(), use.end() - cfg_.max_src_len);
  for (int it : use)
    if (it < 1 || it > num_items_)
      throw std::invalid_argument("encode: item id outside vocabulary");

  const int t = static_cast<int>(use.size());
  std::vector<int> pos(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) pos[static_cast<std::size_t>(i)] = i;
  Var x = ad::add(ad::gather_rows(token_emb_, use), ad::gather_rows(enc_pos_, pos));
  Var h = encoder_.forward(x, /*causal=*/false);
  if (cfg_.pool_memory_mean)
    h = ad::scale(ad::col_sum(h), 1.0 / static_cast<double>(t));

  MemoryBank bank;
  bank.memories.reserve(memory_proj_.size());
  for (const auto& proj : memory_proj_) bank.memories.push_back(ad::matmul(h, proj));
  return bank;
}

Var Regenerator::pattern_summary(const std::vector<int>& pattern) const {
  if (pattern.empty()) throw std::invalid_argument("promote: empty pattern");
  std::vector<int> use(pattern);
  if (static_cast<int>(use.size()) > cfg_.max_pattern_len)
    use.resize(static_cast<std::size_t>(cfg_.max_pattern_len));
  const int t = static_cast<int>(use.size());
  std::vector<int> pos(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) pos[static_cast<std::size_t>(i)] = i;
  const Var& emb = cfg_.share_pattern_embeddings ? token_emb_ : pattern_emb_;
  Var x = ad::add(ad::gather_rows(emb, use), ad::gather_rows(pat_pos_, pos));
  Var h = pattern_encoder_.forward(x, /*causal=*/false);
  return ad::scale(ad::col_sum(h), 1.0 / static_cast<double>(t));  // 1 x d
}

Var Regenerator::promote(const std::vector<int>& pattern) const {
  Var summary = pattern_summary(pattern);
  Var hidden = ad::tanh(ad::add(ad::matmul(summary, prom_w1_), prom_b1_));
  Var logits = ad::add(ad::matmul(hidden, prom_w2_), prom_b2_);
  if (cfg_.promoter_logit_scale != 1.0)
    logits = ad::scale(logits, cfg_.promoter_logit_scale);
  return ad::transpose(ad::softmax_rows(logits));  // K x 1
}

Var Regenerator::mix_memories(const MemoryBank& bank, const Var& pi) {
  if (bank.memories.empty()) throw std::invalid_argument("mix_memories: empty bank");
  if (pi.cols() != 1 || pi.rows() != static_cast<Eigen::Index>(bank.memories.size()))
    throw std::invalid_argument("mix_memories: pi must be K x 1");
  const double sum = pi.value().sum();
  if (std::abs(sum - 1.0) > 1e-5)
    throw std::invalid_argument("mix_memories: pi does not sum to 1");
  std::vector<Var> scaled;
  scaled.reserve(bank.memories.size());
  for (std::size_t k = 0; k < bank.memories.size(); ++k) {
    Var pik = ad::slice_rows(pi, static_cast<Eigen::Index>(k), 1);
    Var factor = ad::broadcast_scalar(pik, bank.memories[k].rows(),
                                      bank.memories[k].cols());
    scaled.push_back(ad::mul(factor, bank.memories[k]));
  }
  return ad::sum_list(scaled);
}

Var Regenerator::decoder_logits(const std::vector<int>& decoder_tokens,
                                const Var& memory) const {
  const int t = static_cast<int>(decoder_tokens.size());
  std::vector<int> pos(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) pos[static_cast<std::size_t>(i)] = i;
  Var x = ad::add(ad::gather_rows(token_emb_, decoder_tokens),
                  ad::gather_rows(dec_pos_, pos));
  Var h = decoder_.forward(x, memory);
  Var logits = ad::add(ad::matmul(h, out_proj_),
                       ad::broadcast_rows(out_bias_, h.rows()));
  // The padding token is never a valid prediction; V+2 effective classes
  // remain (items, BOS, EOS).
  Matrix pad_mask = Matrix::Zero(1, vocab_size());
  pad_mask(0, pad_token()) = -1e30;
  return ad::add(logits, ad::broadcast_rows(ad::constant(std::move(pad_mask)), h.rows()));
}

Var Regenerator::reconstruction_loss_graph(const Dataset& ds,
                                           const std::vector<Pattern>& patterns,
                                           const std::vector<PretrainPair>& batch) const {
  return pretrain_loss_graph(ds, patterns, batch, nullptr);
}

// Shared builder: the reconstruction term, plus (when requested) the mean
// routing entropy computed from the same promoted pi, so the pattern encoder
// runs once per pair.
Var Regenerator::pretrain_loss_graph(const Dataset& ds,
                                     const std::vector<Pattern>& patterns,
                                     const std::vector<PretrainPair>& batch,
                                     Var* routing_entropy) const {
  if (batch.empty()) throw std::invalid_argument("reconstruction_loss: empty batch");
  // Encode each distinct source sequence once.
  std::map<int, MemoryBank> banks;
  for (const auto& pair : batch)
    if (!banks.count(pair.sequence_index))
      banks.emplace(pair.sequence_index,
                    encode(ds.sequences.at(static_cast<std::size_t>(pair.sequence_index)).items));

  std::vector<Var> token_losses;
  std::vector<Var> entropies;
  long total_tokens = 0;
  for (const auto& pair : batch) {
    const auto& pattern = patterns.at(static_cast<std::size_t>(pair.pattern_index)).items;
    std::vector<int> gold(pattern);
    if (static_cast<int>(gold.size()) > cfg_.max_pattern_len)
      gold.resize(static_cast<std::size_t>(cfg_.max_pattern_len));

    Var pi = promote(gold);
    Var memory = mix_memories(banks.at(pair.sequence_index), pi);
    if (routing_entropy != nullptr)
      entropies.push_back(ad::neg(ad::dot(pi, ad::log(pi))));

    std::vector<int> dec_input;
    dec_input.push_back(bos_token());
    dec_input.insert(dec_input.end(), gold.begin(), gold.end());
    std::vector<int> targets(gold);
    targets.push_back(eos_token());

    Var log_probs = ad::log_softmax_rows(decoder_logits(dec_input, memory));
    Matrix pick = Matrix::Zero(log_probs.rows(), log_probs.cols());
    for (std::size_t i = 0; i < targets.size(); ++i)
      pick(static_cast<Eigen::Index>(i), targets[i]) = 1.0;
    token_losses.push_back(ad::neg(ad::dot(log_probs, ad::constant(std::move(pick)))));
    total_tokens += static_cast<long>(targets.size());
  }
  if (routing_entropy != nullptr)
    *routing_entropy =
        ad::scale(ad::sum_list(entropies), 1.0 / static_cast<double>(batch.size()));
  return ad::scale(ad::sum_list(token_losses), 1.0 / static_cast<double>(total_tokens));
}

double Regenerator::reconstruction_loss(const Dataset& ds,
                                        const std::vector<Pattern>& patterns,
                                        const std::vector<PretrainPair>& batch) const {
  ad::NoTapeGuard guard;
  return reconstruction_loss_graph(ds, patterns, batch).scalar();
}

Var Regenerator::routing_entropy_graph(const std::vector<Pattern>& patterns,
                                       const std::vector<PretrainPair>& batch) const {
  if (batch.empty()) throw std::invalid_argument("routing_entropy: empty batch");
  std::vector<Var> entropies;
  entropies.reserve(batch.size());
  for (const auto& pair : batch) {
    const auto& gold = patterns.at(static_cast<std::size_t>(pair.pattern_index)).items;
    Var pi = promote(gold);
    entropies.push_back(ad::neg(ad::dot(pi, ad::log(pi))));
  }
  return ad::scale(ad::sum_list(entropies), 1.0 / static_cast<double>(batch.size()));
}

namespace {

std::uint64_t pair_hash(const PretrainPair& pair, const std::vector<Pattern>& patterns) {
  std::string key = std::to_string(pair.sequence_index);
  for (int it : patterns.at(static_cast<std::size_t>(pair.pattern_index)).items) {
    key += ',';
    key += std::to_string(it);
  }
  return fnv1a(key);
}

}  // namespace

Regenerator::PretrainStats Regenerator::pretrain(const Dataset& ds,
                                                 const std::vector<Pattern>& patterns,
                                                 const std::vector<PretrainPair>& pairs,
                                                 std::uint64_t seed) {
  if (pairs.empty()) throw std::invalid_argument("pretrain: empty pair list");

  // Held-out slice keyed by a stable hash of (sequence index, pattern items).
  std::vector<PretrainPair> train_pairs, holdout_pairs;
  const auto cut = static_cast<std::uint64_t>(cfg_.holdout_fraction * 1000.0);
  for (const auto& pair : pairs) {
    if (pair_hash(pair, patterns) % 1000 < cut)
      holdout_pairs.push_back(pair);
    else
      train_pairs.push_back(pair);
  }
  if (train_pairs.empty()) train_pairs = pairs;

  Rng rng(derive_seed(seed, "pretrain"));
  std::vector<Var> theta = param_vars();
  nn::AdamOptimizer adam(cfg_.learning_rate);

  PretrainStats stats;
  double best_holdout = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<Matrix> best_params = params_.snapshot();

  // Shuffle at sequence granularity and keep each sequence's pairs
  // contiguous, so a batch touches few distinct sequences and the per-batch
  // encoder cache is effective.
  std::map<int, std::vector<std::size_t>> by_sequence;
  for (std::size_t i = 0; i < train_pairs.size(); ++i)
    by_sequence[train_pairs[i].sequence_index].push_back(i);
  std::vector<int> sequence_ids;
  sequence_ids.reserve(by_sequence.size());
  for (const auto& [sid, idxs] : by_sequence) sequence_ids.push_back(sid);

  for (int epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
    rng.shuffle(sequence_ids);
    std::vector<std::size_t> order;
    order.reserve(train_pairs.size());
    for (int sid : sequence_ids)
      for (std::size_t i : by_sequence.at(sid)) order.push_back(i);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg_.batch_size)) {
      const std::size_t end =
          std::min(order.size(), at + static_cast<std::size_t>(cfg_.batch_size));
      std::vector<PretrainPair> batch;
      batch.reserve(end - at);
      for (std::size_t i = at; i < end; ++i) batch.push_back(train_pairs[order[i]]);
      const bool sharpen = cfg_.promoter_entropy_weight > 0.0 && cfg_.diversity_k > 1;
      Var entropy;
      Var recon = pretrain_loss_graph(ds, patterns, batch, sharpen ? &entropy : nullptr);
      Var loss = recon;
      if (sharpen)
        loss = ad::add(recon, ad::scale(entropy, cfg_.promoter_entropy_weight));
      const double loss_value = recon.scalar();
      if (!std::isfinite(loss.scalar()))
        throw TrainingError("pre-training diverged at epoch " + std::to_string(epoch));
      std::vector<Var> grads = ad::grad(loss, theta);
      std::vector<Matrix> grad_values;
      grad_values.reserve(grads.size());
      for (const auto& g : grads) grad_values.push_back(g.value());
      adam.step(theta, grad_values);
      epoch_loss += loss_value;
      ++batches;
    }
    const double train_loss = epoch_loss / static_cast<double>(batches);
    double holdout_loss = std::numeric_limits<double>::quiet_NaN();
    if (!holdout_pairs.empty()) holdout_loss = reconstruction_loss(ds, patterns, holdout_pairs);
    stats.curve.emplace_back(train_loss, holdout_loss);
    stats.epochs = epoch;
    stats.final_train_loss = train_loss;
    stats.final_holdout_loss = holdout_loss;

    if (!holdout_pairs.empty()) {
      if (holdout_loss < best_holdout - 1e-9) {
        best_holdout = holdout_loss;
        best_params = params_.snapshot();
        since_best = 0;
      } else if (++since_best >= cfg_.patience) {
        params_.restore(best_params);
        stats.final_holdout_loss = best_holdout;
        break;
      }
    }
  }
  return stats;
}

std::vector<Regenerator::DecodedPattern> Regenerator::regenerate_sequence(
    const std::vector<int>& seq, double gamma, Rng& rng) const {
  if (gamma < 0.0 || gamma > 1.0)
    throw std::invalid_argument("regenerate_sequence: gamma outside [0,1]");
  ad::NoTapeGuard guard;
  MemoryBank bank = encode(seq);

  std::set<int> seq_items(seq.begin(), seq.end());
  std::vector<DecodedPattern> outputs;
  for (std::size_t k = 0; k < bank.memories.size(); ++k) {
    std::vector<int> emitted;
    while (static_cast<int>(emitted.size()) < cfg_.max_pattern_len) {
      std::vector<int> dec_input;
      dec_input.push_back(bos_token());
      dec_input.insert(dec_input.end(), emitted.begin(), emitted.end());
      Matrix logits = decoder_logits(dec_input, bank.memories[k]).value();
      Eigen::RowVectorXd last = logits.row(logits.rows() - 1);

      const bool generative = rng.uniform() < gamma;
      // BOS and PAD are never emittable; EOS always is.
      last(pad_token()) = -std::numeric_limits<double>::infinity();
      last(bos_token()) = -std::numeric_limits<double>::infinity();
      if (!generative) {
        for (int item = 1; item <= num_items_; ++item)
          if (!seq_items.count(item))
            last(item) = -std::numeric_limits<double>::infinity();
      }
      Eigen::Index best = 0;
      last.maxCoeff(&best);
      const int token = static_cast<int>(best);
      if (token == eos_token()) break;
      emitted.push_back(token);
    }
    if (emitted.size() >= 2) {
      const bool duplicate =
          std::any_of(outputs.begin(), outputs.end(),
                      [&emitted](const DecodedPattern& p) { return p.items == emitted; });
      if (!duplicate)
        outputs.push_back(DecodedPattern{std::move(emitted), static_cast<int>(k)});
    }
  }
  return outputs;
}

void Regenerator::save(const std::string& path,
                       const nlohmann::ordered_json& config_echo) const {
  nn::save_checkpoint(path, config_echo, params_);
}

void Regenerator::load(const std::string& path) {
  nn::load_checkpoint(path, params_);
}

RegeneratedDataset regenerate_dataset(const Regenerator& model, const Dataset& ds,
                                      double gamma, std::uint64_t seed,
                                      bool global_dedupe) {
  Rng rng(derive_seed(seed, "regenerate"));
  RegeneratedDataset out;
  out.dataset.num_items = ds.num_items;
  out.dataset.name = ds.name + "-regenerated";
  std::set<std::vector<int>> seen;
  int line = 0;
  for (const auto& seq : ds.sequences) {
    std::vector<Regenerator::DecodedPattern> decoded =
        model.regenerate_sequence(seq.items, gamma, rng);
    for (auto& d : decoded) {
      if (global_dedupe) {
        if (seen.count(d.items)) continue;
        seen.insert(d.items);
      }
      Sequence pattern_seq;
      pattern_seq.user_id = line;
      pattern_seq.items = std::move(d.items);
      out.dataset.sequences.push_back(std::move(pattern_seq));
      out.provenance.push_back(
          RegeneratedDataset::Provenance{seq.user_id, d.memory_index});
      ++line;
    }
  }
  return out;
}

void save_provenance(const RegeneratedDataset& regen, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write provenance file " + path);
  for (std::size_t i = 0; i < regen.provenance.size(); ++i)
    out << i << ' ' << regen.provenance[i].source_user << ' '
        << regen.provenance[i].memory_index << '\n';
}

}  // namespace dr4sr
