#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dr4sr/corpus.hpp"

using namespace dr4sr;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const std::string path =
      (std::filesystem::temp_directory_path() / name).string();
  std::ofstream out(path, std::ios::binary);
  out << content;
  return path;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("load_dataset reads user-per-line text") {
  const std::string path = write_temp("corpus_basic.txt", "0 1 2 3\n1 2 3\n");
  Dataset ds = load_dataset(path);
  CHECK(ds.sequences.size() == 2);
  CHECK(ds.num_items == 3);
  CHECK(ds.sequences[0].items == std::vector<int>{1, 2, 3});
  CHECK(ds.sequences[1].user_id == 1);
  std::remove(path.c_str());
}

TEST_CASE("load_dataset rejects the reserved padding id") {
  const std::string path = write_temp("corpus_pad.txt", "0 1 0 3\n");
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("line 1"), ParseError);
  std::remove(path.c_str());
}

TEST_CASE("load_dataset names the malformed line") {
  const std::string path = write_temp("corpus_bad.txt", "0 1 2\n1 2 x\n");
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("line 2"), ParseError);
  std::remove(path.c_str());
}

TEST_CASE("load_dataset rejects an empty file") {
  const std::string path = write_temp("corpus_empty.txt", "");
  CHECK_THROWS_AS(load_dataset(path), ParseError);
  std::remove(path.c_str());
}

TEST_CASE("truncation keeps the suffix") {
  std::string line = "0";
  for (int i = 1; i <= 60; ++i) line += " " + std::to_string(i);
  const std::string path = write_temp("corpus_long.txt", line + "\n");
  Dataset ds = load_dataset(path, 50);
  REQUIRE(ds.sequences[0].items.size() == 50);
  CHECK(ds.sequences[0].items.front() == 11);
  CHECK(ds.sequences[0].items.back() == 60);
  std::remove(path.c_str());
}

TEST_CASE("dense remapping compacts ids") {
  const std::string path = write_temp("corpus_remap.txt", "0 10 20\n1 20 30\n");
  Dataset ds = load_dataset(path, 50, /*remap_dense=*/true);
  CHECK(ds.num_items == 3);
  CHECK(ds.sequences[0].items == std::vector<int>{1, 2});
  CHECK(ds.sequences[1].items == std::vector<int>{2, 3});
  std::remove(path.c_str());
}

TEST_CASE("leave-one-out split definition") {
  Dataset ds;
  ds.num_items = 5;
  ds.sequences.push_back({0, {1, 2, 3, 4, 5}});
  SplitDataset split = leave_one_out_split(ds);
  REQUIRE(split.train.sequences.size() == 1);
  CHECK(split.train.sequences[0].items == std::vector<int>{1, 2, 3});
  CHECK(split.val_targets[0].item == 4);
  CHECK(split.val_targets[0].prefix == std::vector<int>{1, 2, 3});
  CHECK(split.test_targets[0].item == 5);
  CHECK(split.test_targets[0].prefix == std::vector<int>{1, 2, 3, 4});
  CHECK(split.num_excluded == 0);
}

TEST_CASE("leave-one-out minimum length and exclusion") {
  Dataset ds;
  ds.num_items = 3;
  ds.sequences.push_back({0, {1, 2, 3}});
  ds.sequences.push_back({1, {1, 2}});
  SplitDataset split = leave_one_out_split(ds);
  CHECK(split.train.sequences.size() == 1);
  CHECK(split.train.sequences[0].items == std::vector<int>{1});
  CHECK(split.val_targets[0].item == 2);
  CHECK(split.test_targets[0].item == 3);
  CHECK(split.num_excluded == 1);
}

TEST_CASE("split reassembles the original sequence") {
  SyntheticSpec spec;
  spec.num_users = 40;
  spec.num_items = 12;
  spec.planted_patterns = {{1, 2, 3}, {4, 5}, {6, 7, 8, 9}};
  spec.noise_rate = 0.25;
  Dataset ds = generate_synthetic(spec, 99).dataset;
  SplitDataset split = leave_one_out_split(ds);
  REQUIRE(split.train.sequences.size() == ds.sequences.size());
  for (std::size_t i = 0; i < split.train.sequences.size(); ++i) {
    std::vector<int> rebuilt = split.train.sequences[i].items;
    rebuilt.push_back(split.val_targets[i].item);
    rebuilt.push_back(split.test_targets[i].item);
    CHECK(rebuilt == ds.sequences[i].items);
  }
}

TEST_CASE("synthetic generation is deterministic and honors noise_rate=0") {
  SyntheticSpec spec;
  spec.num_users = 10;
  spec.num_items = 6;
  spec.planted_patterns = {{1, 2, 3}};
  spec.noise_rate = 0.0;
  SyntheticDataset a = generate_synthetic(spec, 7);
  SyntheticDataset b = generate_synthetic(spec, 7);
  for (std::size_t i = 0; i < a.dataset.sequences.size(); ++i) {
    CHECK(a.dataset.sequences[i].items == b.dataset.sequences[i].items);
    // noiseless: every sequence is a repetition of the planted pattern
    const auto& items = a.dataset.sequences[i].items;
    REQUIRE(items.size() % 3 == 0);
    for (std::size_t j = 0; j < items.size(); j += 3) {
      CHECK(items[j] == 1);
      CHECK(items[j + 1] == 2);
      CHECK(items[j + 2] == 3);
    }
  }
}

TEST_CASE("synthetic noise fraction approaches the configured rate") {
  SyntheticSpec spec;
  spec.num_users = 1000;
  spec.num_items = 30;
  spec.planted_patterns = {{1, 2, 3}, {4, 5, 6}, {7, 8, 9, 10}};
  spec.noise_rate = 0.3;
  SyntheticDataset sd = generate_synthetic(spec, 1234);
  long noise = 0, planted = 0;
  for (const auto& mask : sd.noise_mask)
    for (auto m : mask) (m ? noise : planted)++;
  const double fraction = static_cast<double>(noise) / static_cast<double>(planted);
  CHECK(fraction == doctest::Approx(0.3).epsilon(0.1));
  CHECK(std::abs(fraction - 0.3) < 0.03);
}

TEST_CASE("synthetic rejects an empty pattern list") {
  SyntheticSpec spec;
  spec.planted_patterns = {};
  CHECK_THROWS_AS(generate_synthetic(spec, 1), std::invalid_argument);
}

TEST_CASE("save and reload round-trips") {
  SyntheticSpec spec;
  spec.num_users = 8;
  spec.num_items = 9;
  spec.planted_patterns = {{1, 2}, {3, 4, 5}};
  spec.noise_rate = 0.2;
  Dataset ds = generate_synthetic(spec, 5).dataset;
  const std::string path =
      (std::filesystem::temp_directory_path() / "corpus_roundtrip.txt").string();
  save_dataset(ds, path);
  Dataset re = load_dataset(path, 0);
  REQUIRE(re.sequences.size() == ds.sequences.size());
  for (std::size_t i = 0; i < ds.sequences.size(); ++i)
    CHECK(re.sequences[i].items == ds.sequences[i].items);
  std::remove(path.c_str());
}

}  // TEST_SUITE
