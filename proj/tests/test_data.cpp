// Copyright 2026 The xtar Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "xtar/data.hpp"
#include "xtar/error.hpp"

using namespace xtar;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("xtar_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

const DatasetSplits& default_splits() {
  static const DatasetSplits s = generate_synthetic({});
  return s;
}

bool same_episode(const Episode& a, const Episode& b) {
  return a.support.inputs == b.support.inputs && a.support.labels == b.support.labels &&
         a.query_base.inputs == b.query_base.inputs && a.query_base.labels == b.query_base.labels &&
         a.query_novel.inputs == b.query_novel.inputs &&
         a.query_novel.labels == b.query_novel.labels && a.label_map == b.label_map &&
         a.masked_base == b.masked_base;
}

}  // namespace

TEST_SUITE("dataset") {
  TEST_CASE("synthetic defaults have the expected class universe") {
    const auto& s = default_splits();
    CHECK(s.num_base_classes() == 20);
    CHECK(s[Split::kBaseTrain].size() == 20);
    CHECK(s[Split::kNovelTrain].size() == 15);
    CHECK(s[Split::kNovelVal].size() == 5);
    CHECK(s[Split::kNovelTest].size() == 5);
    CHECK_NOTHROW(s.validate());
  }

  TEST_CASE("save then load reproduces every tensor") {
    const auto dir = scratch_dir("roundtrip");
    const auto& s = default_splits();
    save_dataset(s, dir / "manifest.json");
    const DatasetSplits back = load_dataset(dir / "manifest.json");
    CHECK(back.num_base_classes() == 20);
    CHECK(back.input_shape() == s.input_shape());
    for (Split sp : kAllSplits) {
      REQUIRE(back[sp].size() == s[sp].size());
      for (std::size_t i = 0; i < s[sp].size(); ++i) {
        CHECK(back[sp][i].class_id == s[sp][i].class_id);
        CHECK(back[sp][i].samples == s[sp][i].samples);
      }
    }
  }

  TEST_CASE("overlapping novel splits are rejected on load") {
    const auto dir = scratch_dir("overlap");
    save_dataset(default_splits(), dir / "manifest.json");
    nlohmann::json j;
    std::ifstream(dir / "manifest.json") >> j;
    auto& val = j["splits"]["novel/val"];
    auto& test = j["splits"]["novel/test"];
    test["classes"][0] = val["classes"][0];
    test["files"][0] = val["files"][0];
    std::ofstream(dir / "manifest.json") << j.dump(2);
    try {
      load_dataset(dir / "manifest.json");
      FAIL("expected overlap error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("novel splits overlap") != std::string::npos);
    }
  }

  TEST_CASE("missing manifest and missing tensor files") {
    const auto dir = scratch_dir("missing");
    CHECK_THROWS_AS(load_dataset(dir / "nope.json"), Error);
    save_dataset(default_splits(), dir / "manifest.json");
    std::filesystem::remove(dir / "novel_test_class41.xtds");
    CHECK_THROWS_AS(load_dataset(dir / "manifest.json"), Error);
  }

  TEST_CASE("zero spread gives identical samples per class") {
    SyntheticConfig cfg;
    cfg.cluster_spread = 0.0;
    const auto s = generate_synthetic(cfg);
    const auto& c = s[Split::kNovelVal][0];
    for (std::size_t i = 1; i < c.count(); ++i) CHECK(c.samples.slice(i, i + 1) == c.samples.slice(0, 1));
  }

  TEST_CASE("different seeds give different templates") {
    SyntheticConfig a, b;
    b.seed = 1;
    CHECK_FALSE(generate_synthetic(a)[Split::kBaseTrain][0].samples ==
                generate_synthetic(b)[Split::kBaseTrain][0].samples);
  }

  TEST_CASE("nearest class mean separates held-out samples") {
    // 25 classes: the 20 base classes plus novel val/test. Means are estimated
    // from base/train (or the first half of a novel class) and used to label
    // every held-out sample.
    const auto& s = default_splits();
    std::vector<std::pair<int, Tensor>> centers;
    std::vector<std::pair<int, Tensor>> held_out;
    auto mean_of = [](const Tensor& rows) {
      Tensor m({1, rows.cols()}, 0.0);
      for (std::size_t r = 0; r < rows.rows(); ++r)
        for (std::size_t j = 0; j < rows.cols(); ++j) m[j] += rows.at(r, j) / rows.rows();
      return m;
    };
    for (const auto& c : s[Split::kBaseTrain]) {
      centers.emplace_back(c.class_id, mean_of(c.samples));
      held_out.emplace_back(c.class_id, s.class_in(Split::kBaseTest, c.class_id).samples);
    }
    for (Split sp : {Split::kNovelVal, Split::kNovelTest})
      for (const auto& c : s[sp]) {
        const std::size_t half = c.count() / 2;
        centers.emplace_back(c.class_id, mean_of(c.samples.slice(0, half)));
        held_out.emplace_back(c.class_id, c.samples.slice(half, c.count()));
      }
    REQUIRE(centers.size() == 30);
    std::size_t correct = 0, total = 0;
    for (const auto& [label, rows] : held_out)
      for (std::size_t r = 0; r < rows.rows(); ++r) {
        int best = -1;
        double best_d = 1e300;
        for (const auto& [id, m] : centers) {
          double d = 0;
          for (std::size_t j = 0; j < rows.cols(); ++j) d += std::pow(rows.at(r, j) - m[j], 2);
          if (d < best_d) best_d = d, best = id;
        }
        correct += best == label;
        ++total;
      }
    CHECK(correct == total);
  }
}

TEST_SUITE("episodes") {
  TEST_CASE("5-way 5-shot sizes") {
    const auto ep = sample_episode(default_splits(), {.phase = Phase::kTest}, 3);
    CHECK(ep.support.size() == 25);
    CHECK(ep.query_novel.size() == 25);
    CHECK(ep.query_base.size() == 25);
    CHECK(ep.support.inputs.dim(0) == 25);
  }

  TEST_CASE("one-shot support") {
    const auto ep = sample_episode(default_splits(), {.phase = Phase::kVal, .k_shot = 1}, 9);
    std::map<int, int> per_label;
    for (int l : ep.support.labels) ++per_label[l];
    CHECK(per_label.size() == 5);
    for (auto [l, n] : per_label) CHECK(n == 1);
  }

  TEST_CASE("same seed, same episode") {
    const auto& s = default_splits();
    CHECK(same_episode(sample_episode(s, {}, 42), sample_episode(s, {}, 42)));
    CHECK_FALSE(same_episode(sample_episode(s, {}, 42), sample_episode(s, {}, 43)));
  }

  TEST_CASE("label ranges, disjoint support and leakage") {
    const auto& s = default_splits();
    std::set<int> test_classes;
    for (const auto& c : s[Split::kNovelTest]) test_classes.insert(c.class_id);
    for (bool fake : {false, true})
      for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto ep = sample_episode(s, {.phase = Phase::kMetaTrain, .fake_novel = fake}, seed);
        for (int l : ep.support.labels) CHECK((l >= 21 && l <= 25));
        for (int l : ep.query_novel.labels) CHECK((l >= 21 && l <= 25));
        for (int l : ep.query_base.labels) CHECK((l >= 1 && l <= 20));
        std::set<SampleRef> support(ep.support.refs.begin(), ep.support.refs.end());
        for (const auto& r : ep.query_novel.refs) CHECK_FALSE(support.contains(r));
        for (auto [src, label] : ep.label_map) CHECK_FALSE(test_classes.contains(src));
        if (fake) {
          CHECK(ep.masked_base.size() == 5);
          for (int l : ep.query_base.labels)
            CHECK_FALSE(std::binary_search(ep.masked_base.begin(), ep.masked_base.end(), l));
        } else {
          CHECK(ep.masked_base.empty());
        }
      }
  }

  TEST_CASE("balanced base queries") {
    const auto ep =
        sample_episode(default_splits(), {.phase = Phase::kTest, .balanced_base = true}, 5);
    std::map<int, int> per_label;
    for (int l : ep.query_base.labels) ++per_label[l];
    CHECK(per_label.size() == 5);
    for (auto [l, n] : per_label) CHECK(n == 5);
  }

  TEST_CASE("errors") {
    const auto& s = default_splits();
    CHECK_THROWS_AS(sample_episode(s, {.phase = Phase::kTest, .n_way = 6}, 0), Error);
    CHECK_THROWS_AS(sample_episode(s, {.phase = Phase::kTest, .k_shot = 40}, 0), Error);
    CHECK_THROWS_AS(sample_episode(s, {.n_way = 5, .feature_dim = 5}, 0), Error);
  }
}
