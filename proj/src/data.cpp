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

#include "xtar/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"

#include "xtar/error.hpp"
#include "xtar/tensor_io.hpp"

namespace xtar {

namespace {

constexpr const char* kSplitNames[] = {"base/train", "base/val",  "base/test",
                                       "novel/train", "novel/val", "novel/test"};

bool is_base(Split s) { return static_cast<int>(s) < 3; }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  // Modulo bias is below 2^-40 for the sizes used here.
  return static_cast<std::size_t>(rng() % n);
}

template <class T>
void partial_shuffle(std::vector<T>& v, std::size_t k, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < k && i + 1 < v.size(); ++i) {
    const std::size_t j = i + uniform_index(rng, v.size() - i);
    std::swap(v[i], v[j]);
  }
}

Shape sample_shape(const Shape& input_shape, std::size_t count) {
  Shape s{count};
  s.insert(s.end(), input_shape.begin(), input_shape.end());
  return s;
}

}  // namespace

const char* split_name(Split s) { return kSplitNames[static_cast<int>(s)]; }

Split parse_split(const std::string& name) {
  for (auto s : kAllSplits)
    if (name == split_name(s)) return s;
  fail(ErrorCode::kInvalidArgument, "unknown split '" + name + "'");
}

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kMetaTrain: return "meta_train";
    case Phase::kVal: return "val";
    case Phase::kTest: return "test";
  }
  return "?";
}

Phase parse_phase(const std::string& name) {
  if (name == "meta_train" || name == "train") return Phase::kMetaTrain;
  if (name == "val") return Phase::kVal;
  if (name == "test") return Phase::kTest;
  fail(ErrorCode::kInvalidArgument, "unknown phase '" + name + "'");
}

DatasetSplits::DatasetSplits(Shape input_shape, std::size_t num_base_classes,
                             std::array<std::vector<ClassSamples>, 6> splits)
    : input_shape_(std::move(input_shape)),
      num_base_classes_(num_base_classes),
      splits_(std::move(splits)) {
  validate();
}

const ClassSamples& DatasetSplits::class_in(Split s, int class_id) const {
  for (const auto& c : (*this)[s])
    if (c.class_id == class_id) return c;
  fail(ErrorCode::kInvalidArgument,
       "class " + std::to_string(class_id) + " not in split " + split_name(s));
}

LabeledSample DatasetSplits::sample(const SampleRef& ref) const {
  const auto& c = class_in(ref.split, ref.class_id);
  require(ref.index < c.count(), ErrorCode::kInvalidArgument, "sample index out of range");
  return {c.samples.slice(ref.index, ref.index + 1).reshaped(input_shape_), ref.class_id,
          ref.split};
}

void DatasetSplits::validate() const {
  require(num_base_classes_ > 0, ErrorCode::kInvalidArgument, "dataset has no base classes");
  require(!input_shape_.empty(), ErrorCode::kInvalidArgument, "dataset input shape is empty");
  std::set<int> base_universe;
  for (int c = 1; c <= static_cast<int>(num_base_classes_); ++c) base_universe.insert(c);

  std::array<std::set<int>, 6> ids;
  for (auto s : kAllSplits) {
    auto& set = ids[static_cast<int>(s)];
    for (const auto& c : (*this)[s]) {
      require(set.insert(c.class_id).second, ErrorCode::kInvalidArgument,
              std::string("duplicate class ") + std::to_string(c.class_id) + " in " + split_name(s));
      require(c.samples.rank() == input_shape_.size() + 1 &&
                  std::equal(input_shape_.begin(), input_shape_.end(),
                             c.samples.shape().begin() + 1),
              ErrorCode::kShapeMismatch,
              std::string("class ") + std::to_string(c.class_id) + " in " + split_name(s) +
                  " has shape " + shape_string(c.samples.shape()) + ", expected [n]+" +
                  shape_string(input_shape_));
      require(c.samples.all_finite(), ErrorCode::kNonFinite,
              std::string("non-finite samples in ") + split_name(s));
    }
    if (is_base(s)) {
      require(set == base_universe, ErrorCode::kInvalidArgument,
              std::string(split_name(s)) + " must contain exactly the base classes 1.." +
                  std::to_string(num_base_classes_));
    } else {
      for (int c : set)
        require(!base_universe.contains(c), ErrorCode::kInvalidArgument,
                std::string(split_name(s)) + " reuses base class id " + std::to_string(c));
      // novel/train may be empty when base/train doubles as the novel source.
      require(s == Split::kNovelTrain || !set.empty(), ErrorCode::kInvalidArgument,
              std::string(split_name(s)) + " is empty");
    }
  }
  const Split novel[] = {Split::kNovelTrain, Split::kNovelVal, Split::kNovelTest};
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j)
      for (int c : ids[static_cast<int>(novel[i])])
        require(!ids[static_cast<int>(novel[j])].contains(c), ErrorCode::kInvalidArgument,
                std::string("novel splits overlap: class ") + std::to_string(c) + " in " +
                    split_name(novel[i]) + " and " + split_name(novel[j]));
}

DatasetSplits load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  require(static_cast<bool>(is), ErrorCode::kIo, "cannot open manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorrupt, "manifest is not valid JSON: " + std::string(e.what()));
  }
  try {
    require(j.value("format", std::string()) == "xtar-dataset", ErrorCode::kCorrupt,
            "manifest format must be 'xtar-dataset'");
    require(j.at("version").get<int>() == 1, ErrorCode::kVersionMismatch,
            "unsupported manifest version");
    const auto nb = j.at("num_base_classes").get<std::size_t>();
    const auto input_shape = j.at("input_shape").get<Shape>();
    const auto dir = manifest_path.parent_path();
    std::array<std::vector<ClassSamples>, 6> splits;
    for (auto s : kAllSplits) {
      const auto& entry = j.at("splits").at(split_name(s));
      const auto classes = entry.at("classes").get<std::vector<int>>();
      const auto files = entry.at("files").get<std::vector<std::string>>();
      require(classes.size() == files.size(), ErrorCode::kCorrupt,
              std::string(split_name(s)) + ": classes and files differ in length");
      for (std::size_t i = 0; i < classes.size(); ++i) {
        const auto path = dir / files[i];
        require(std::filesystem::exists(path), ErrorCode::kIo, "missing tensor file " + path.string());
        splits[static_cast<int>(s)].push_back({classes[i], load_xtds(path)});
      }
    }
    return DatasetSplits(input_shape, nb, std::move(splits));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorrupt, "malformed manifest: " + std::string(e.what()));
  }
}

void save_dataset(const DatasetSplits& splits, const std::filesystem::path& manifest_path) {
  const auto dir = manifest_path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["format"] = "xtar-dataset";
  j["version"] = 1;
  j["num_base_classes"] = splits.num_base_classes();
  j["input_shape"] = splits.input_shape();
  for (auto s : kAllSplits) {
    std::string tag = split_name(s);
    std::replace(tag.begin(), tag.end(), '/', '_');
    std::vector<int> classes;
    std::vector<std::string> files;
    for (const auto& c : splits[s]) {
      const std::string file = tag + "_class" + std::to_string(c.class_id) + ".xtds";
      save_xtds(dir / file, c.samples);
      classes.push_back(c.class_id);
      files.push_back(file);
    }
    j["splits"][split_name(s)] = {{"classes", classes}, {"files", files}};
  }
  std::ofstream os(manifest_path);
  require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + manifest_path.string());
  os << j.dump(2) << '\n';
}

DatasetSplits generate_synthetic(const SyntheticConfig& config) {
  require(config.num_base_classes > 0 && config.per_class_count > 0, ErrorCode::kInvalidArgument,
          "synthetic dataset needs positive class and sample counts");
  require(config.novel_val_classes > 0 && config.novel_test_classes > 0,
          ErrorCode::kInvalidArgument, "synthetic dataset needs novel val/test classes");
  require(config.cluster_spread >= 0.0, ErrorCode::kInvalidArgument,
          "cluster spread must be non-negative");
  require(config.superclass_share >= 0.0 && config.superclass_share < 1.0,
          ErrorCode::kInvalidArgument, "superclass share must lie in [0, 1)");
  require(!config.input_shape.empty() && shape_size(config.input_shape) > 0,
          ErrorCode::kInvalidArgument, "synthetic input shape is empty");
  const std::size_t n_val = static_cast<std::size_t>(config.per_class_count * config.base_val_fraction);
  const std::size_t n_test = static_cast<std::size_t>(config.per_class_count * config.base_test_fraction);
  require(n_val > 0 && n_test > 0 && n_val + n_test < config.per_class_count,
          ErrorCode::kInvalidArgument, "per-class count too small for the base val/test split");

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t dim = shape_size(config.input_shape);
  const std::size_t total_classes = config.num_base_classes + config.novel_train_classes +
                                    config.novel_val_classes + config.novel_test_classes;

  std::vector<std::vector<double>> centers(config.superclasses, std::vector<double>(dim));
  for (auto& c : centers)
    for (auto& v : c) v = normal(rng);
  std::vector<std::vector<double>> templates(total_classes, std::vector<double>(dim));
  const double shared = std::sqrt(config.superclass_share);
  const double own = std::sqrt(1.0 - config.superclass_share);
  for (std::size_t c = 0; c < total_classes; ++c)
    for (std::size_t k = 0; k < dim; ++k) {
      templates[c][k] = normal(rng);
      if (!centers.empty())
        templates[c][k] = shared * centers[c % centers.size()][k] + own * templates[c][k];
    }

  auto draw = [&](std::size_t cls, std::size_t count) {
    std::vector<double> values(count * dim);
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t k = 0; k < dim; ++k)
        values[i * dim + k] = templates[cls][k] + config.cluster_spread * normal(rng);
    return Tensor(sample_shape(config.input_shape, count), std::move(values));
  };

  std::array<std::vector<ClassSamples>, 6> splits;
  const std::size_t n_train = config.per_class_count - n_val - n_test;
  for (std::size_t c = 0; c < config.num_base_classes; ++c) {
    const int id = static_cast<int>(c + 1);
    splits[0].push_back({id, draw(c, n_train)});
    splits[1].push_back({id, draw(c, n_val)});
    splits[2].push_back({id, draw(c, n_test)});
  }
  std::size_t cls = config.num_base_classes;
  const std::size_t novel_counts[] = {config.novel_train_classes, config.novel_val_classes,
                                      config.novel_test_classes};
  for (int s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < novel_counts[s]; ++i, ++cls)
      splits[3 + s].push_back({static_cast<int>(cls + 1), draw(cls, config.per_class_count)});

  return DatasetSplits(config.input_shape, config.num_base_classes, std::move(splits));
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Episode sample_episode(const DatasetSplits& splits, const EpisodeSpec& spec, std::uint64_t seed) {
  require(spec.n_way > 0 && spec.k_shot > 0 && spec.q_per_class > 0, ErrorCode::kInvalidArgument,
          "episode needs positive N, K and queries per class");
  if (spec.feature_dim > 0)
    require(spec.n_way < spec.feature_dim, ErrorCode::kInvalidArgument,
            "N must be smaller than the feature length D");

  Split novel_split = Split::kNovelTrain, base_split = Split::kBaseTrain;
  switch (spec.phase) {
    case Phase::kMetaTrain:
      novel_split = spec.fake_novel ? Split::kBaseTrain : Split::kNovelTrain;
      base_split = Split::kBaseTrain;
      break;
    case Phase::kVal:
      novel_split = Split::kNovelVal;
      base_split = Split::kBaseVal;
      break;
    case Phase::kTest:
      novel_split = Split::kNovelTest;
      base_split = Split::kBaseTest;
      break;
  }
  const bool fake = spec.phase == Phase::kMetaTrain && spec.fake_novel;
  const auto nb = splits.num_base_classes();
  const std::size_t per_class = spec.k_shot + spec.q_per_class;

  std::vector<const ClassSamples*> candidates;
  for (const auto& c : splits[novel_split])
    if (c.count() >= per_class) candidates.push_back(&c);
  require(candidates.size() >= spec.n_way, ErrorCode::kInsufficientData,
          std::string(split_name(novel_split)) + " has " + std::to_string(candidates.size()) +
              " classes with >= " + std::to_string(per_class) + " samples; need " +
              std::to_string(spec.n_way));

  std::mt19937_64 rng(seed);
  partial_shuffle(candidates, spec.n_way, rng);
  candidates.resize(spec.n_way);

  Episode ep;
  ep.num_base_classes = nb;
  ep.n_way = spec.n_way;
  ep.k_shot = spec.k_shot;
  ep.seed = seed;

  std::vector<Tensor> support_rows, novel_rows, base_rows;
  for (std::size_t n = 0; n < spec.n_way; ++n) {
    const ClassSamples& c = *candidates[n];
    const int label = static_cast<int>(nb + 1 + n);
    ep.label_map[c.class_id] = label;
    if (fake) ep.masked_base.push_back(c.class_id);
    std::vector<std::size_t> idx(c.count());
    std::iota(idx.begin(), idx.end(), 0);
    partial_shuffle(idx, per_class, rng);
    for (std::size_t i = 0; i < per_class; ++i) {
      auto& set = i < spec.k_shot ? ep.support : ep.query_novel;
      auto& rows = i < spec.k_shot ? support_rows : novel_rows;
      rows.push_back(c.samples.slice(idx[i], idx[i] + 1));
      set.labels.push_back(label);
      set.refs.push_back({novel_split, c.class_id, idx[i]});
    }
  }
  std::sort(ep.masked_base.begin(), ep.masked_base.end());

  const std::size_t n_base = ep.query_novel.size();
  auto masked = [&](int id) {
    return std::binary_search(ep.masked_base.begin(), ep.masked_base.end(), id);
  };
  if (spec.balanced_base) {
    std::vector<const ClassSamples*> pool;
    for (const auto& c : splits[base_split])
      if (!masked(c.class_id) && c.count() >= spec.q_per_class) pool.push_back(&c);
    require(pool.size() >= spec.n_way, ErrorCode::kInsufficientData,
            "not enough base classes for balanced base queries");
    partial_shuffle(pool, spec.n_way, rng);
    for (std::size_t b = 0; b < spec.n_way; ++b) {
      const ClassSamples& c = *pool[b];
      std::vector<std::size_t> idx(c.count());
      std::iota(idx.begin(), idx.end(), 0);
      partial_shuffle(idx, spec.q_per_class, rng);
      for (std::size_t i = 0; i < spec.q_per_class; ++i) {
        base_rows.push_back(c.samples.slice(idx[i], idx[i] + 1));
        ep.query_base.labels.push_back(c.class_id);
        ep.query_base.refs.push_back({base_split, c.class_id, idx[i]});
      }
    }
  } else {
    std::vector<SampleRef> pool;
    for (const auto& c : splits[base_split]) {
      if (masked(c.class_id)) continue;
      for (std::size_t i = 0; i < c.count(); ++i) pool.push_back({base_split, c.class_id, i});
    }
    require(pool.size() >= n_base, ErrorCode::kInsufficientData,
            std::string(split_name(base_split)) + " has too few samples for the base query set");
    partial_shuffle(pool, n_base, rng);
    for (std::size_t i = 0; i < n_base; ++i) {
      const auto& ref = pool[i];
      const auto& c = splits.class_in(ref.split, ref.class_id);
      base_rows.push_back(c.samples.slice(ref.index, ref.index + 1));
      ep.query_base.labels.push_back(ref.class_id);
      ep.query_base.refs.push_back(ref);
    }
  }

  ep.support.inputs = concat_rows(support_rows);
  ep.query_novel.inputs = concat_rows(novel_rows);
  ep.query_base.inputs = concat_rows(base_rows);
  return ep;
}

}  // namespace xtar
