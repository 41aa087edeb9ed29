#include "dr4sr/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace dr4sr {

namespace {

long parse_int(const std::string& token, int line_no, const char* what) {
  long value = 0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc{} || ptr != token.data() + token.size())
    throw ParseError("line " + std::to_string(line_no) + ": malformed " + what +
                     " '" + token + "'");
  return value;
}

}  // namespace

Dataset load_dataset(const std::string& path, int max_len, bool remap_dense) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset file " + path);

  Dataset ds;
  ds.name = path;
  std::string line;
  int line_no = 0;
  int max_item = 0;
  while (std::getline(in, line)) {
    ++line_no;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string token;
    if (!(ss >> token))
      throw ParseError("line " + std::to_string(line_no) + ": empty record");
    const long user = parse_int(token, line_no, "user id");
    if (user < 0)
      throw ParseError("line " + std::to_string(line_no) + ": negative user id");
    Sequence seq;
    seq.user_id = static_cast<int>(user);
    while (ss >> token) {
      const long item = parse_int(token, line_no, "item id");
      if (item == 0)
        throw ParseError("line " + std::to_string(line_no) +
                         ": item id 0 is reserved for padding");
      if (item < 0)
        throw ParseError("line " + std::to_string(line_no) + ": negative item id");
      seq.items.push_back(static_cast<int>(item));
    }
    if (seq.items.empty())
      throw ParseError("line " + std::to_string(line_no) + ": no items for user " +
                       std::to_string(user));
    if (max_len > 0 && static_cast<int>(seq.items.size()) > max_len) {
      // Truncation keeps the most recent items (the suffix).
      seq.items.erase(seq.items.begin(),
                      seq.items.end() - static_cast<std::ptrdiff_t>(max_len));
    }
    for (int it : seq.items) max_item = std::max(max_item, it);
    ds.sequences.push_back(std::move(seq));
  }
  if (ds.sequences.empty()) throw ParseError("empty dataset: " + path);

  if (remap_dense) {
    std::map<int, int> remap;
    for (const auto& s : ds.sequences)
      for (int it : s.items) remap.emplace(it, 0);
    int next = 1;
    for (auto& [old_id, new_id] : remap) new_id = next++;
    for (auto& s : ds.sequences)
      for (int& it : s.items) it = remap.at(it);
    ds.num_items = next - 1;
  } else {
    ds.num_items = max_item;
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset file " + path);
  for (const auto& s : ds.sequences) {
    out << s.user_id;
    for (int it : s.items) out << ' ' << it;
    out << '\n';
  }
}

SplitDataset leave_one_out_split(const Dataset& ds) {
  SplitDataset split;
  split.train.num_items = ds.num_items;
  split.train.name = ds.name;
  for (const auto& s : ds.sequences) {
    if (s.items.size() < 3) {
      ++split.num_excluded;
      continue;
    }
    const std::size_t n = s.items.size();
    Sequence train_seq;
    train_seq.user_id = s.user_id;
    train_seq.items.assign(s.items.begin(), s.items.end() - 2);
    split.train.sequences.push_back(train_seq);

    HeldOutTarget val;
    val.user_id = s.user_id;
    val.prefix = train_seq.items;
    val.item = s.items[n - 2];
    split.val_targets.push_back(std::move(val));

    HeldOutTarget test;
    test.user_id = s.user_id;
    test.prefix.assign(s.items.begin(), s.items.end() - 1);
    test.item = s.items[n - 1];
    split.test_targets.push_back(std::move(test));
  }
  return split;
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.planted_patterns.empty())
    throw std::invalid_argument("generate_synthetic: planted pattern list is empty");
  if (spec.noise_rate < 0.0 || spec.noise_rate > 1.0)
    throw std::invalid_argument("generate_synthetic: noise_rate outside [0,1]");
  if (spec.num_users <= 0 || spec.num_items <= 0 || spec.patterns_per_user <= 0)
    throw std::invalid_argument("generate_synthetic: sizes must be positive");
  for (const auto& p : spec.planted_patterns) {
    if (p.empty()) throw std::invalid_argument("generate_synthetic: empty pattern");
    for (int it : p)
      if (it < 1 || it > spec.num_items)
        throw std::invalid_argument("generate_synthetic: pattern item outside vocabulary");
  }

  Rng rng(seed);
  SyntheticDataset out;
  out.dataset.num_items = spec.num_items;
  out.dataset.name = "synthetic";
  for (int u = 0; u < spec.num_users; ++u) {
    Sequence seq;
    seq.user_id = u;
    std::vector<std::uint8_t> mask;
    for (int k = 0; k < spec.patterns_per_user; ++k) {
      const auto& pat = spec.planted_patterns[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(spec.planted_patterns.size()) - 1))];
      for (int it : pat) {
        seq.items.push_back(it);
        mask.push_back(0);
        if (rng.uniform() < spec.noise_rate) {
          seq.items.push_back(rng.uniform_int(1, spec.num_items));
          mask.push_back(1);
        }
      }
    }
    out.dataset.sequences.push_back(std::move(seq));
    out.noise_mask.push_back(std::move(mask));
  }
  return out;
}

}  // namespace dr4sr
