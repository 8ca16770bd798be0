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

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xtar/tensor.hpp"

namespace xtar {

enum class Split : std::uint8_t { kBaseTrain, kBaseVal, kBaseTest, kNovelTrain, kNovelVal, kNovelTest };
inline constexpr std::array<Split, 6> kAllSplits = {Split::kBaseTrain,  Split::kBaseVal,
                                                    Split::kBaseTest,   Split::kNovelTrain,
                                                    Split::kNovelVal,   Split::kNovelTest};

const char* split_name(Split s);  // "base/train", ...
Split parse_split(const std::string& name);

enum class Phase : std::uint8_t { kMetaTrain, kVal, kTest };
const char* phase_name(Phase p);
Phase parse_phase(const std::string& name);

// All samples of one class within one split, stacked on the leading axis.
struct ClassSamples {
  int class_id = 0;
  Tensor samples;  // [count, input_shape...]

  std::size_t count() const { return samples.dim(0); }
};

struct SampleRef {
  Split split;
  int class_id;
  std::size_t index;

  friend auto operator<=>(const SampleRef&, const SampleRef&) = default;
};

struct LabeledSample {
  Tensor input;
  int label = 0;
  Split source_split = Split::kBaseTrain;
};

/// The six class-disjoint collections. Base class ids are 1..num_base_classes.
class DatasetSplits {
 public:
  DatasetSplits() = default;
  DatasetSplits(Shape input_shape, std::size_t num_base_classes,
                std::array<std::vector<ClassSamples>, 6> splits);

  const std::vector<ClassSamples>& operator[](Split s) const {
    return splits_[static_cast<std::size_t>(s)];
  }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_base_classes() const { return num_base_classes_; }
  const ClassSamples& class_in(Split s, int class_id) const;
  LabeledSample sample(const SampleRef& ref) const;

  // Throws kInvalidArgument describing the first violated invariant.
  void validate() const;

 private:
  Shape input_shape_;
  std::size_t num_base_classes_ = 0;
  std::array<std::vector<ClassSamples>, 6> splits_;
};

// Manifest: JSON {"format": "xtar-dataset", "version": 1, "num_base_classes",
// "input_shape", "splits": {"base/train": {"classes": [...], "files": [...]}, ...}}
// with file paths relative to the manifest directory.
DatasetSplits load_dataset(const std::filesystem::path& manifest_path);
void save_dataset(const DatasetSplits& splits, const std::filesystem::path& manifest_path);

struct SyntheticConfig {
  std::size_t num_base_classes = 20;
  std::size_t novel_train_classes = 15;
  std::size_t novel_val_classes = 5;
  std::size_t novel_test_classes = 5;
  std::size_t per_class_count = 40;
  Shape input_shape = {64};
  double cluster_spread = 0.1;
  // Fractions of each base class's samples routed to base/val and base/test.
  double base_val_fraction = 0.2;
  double base_test_fraction = 0.2;
  // Optional class hierarchy: class c draws its template as
  // sqrt(share) * center[c % superclasses] + sqrt(1 - share) * own noise,
  // so base and novel classes can be near neighbours. 0 disables it.
  std::size_t superclasses = 0;
  double superclass_share = 0.0;
  std::uint64_t seed = 0;
};

/// Gaussian-perturbed random templates, one per class.
DatasetSplits generate_synthetic(const SyntheticConfig& config);

struct SampleSet {
  Tensor inputs;            // [count, input_shape...]
  std::vector<int> labels;  // episode labels, 1-based
  std::vector<SampleRef> refs;

  std::size_t size() const { return labels.size(); }
};

struct Episode {
  SampleSet support;      // N*K samples, labels in [N_b+1, N_b+N]
  SampleSet query_base;   // labels in [1, N_b]
  SampleSet query_novel;  // labels in [N_b+1, N_b+N]
  std::map<int, int> label_map;  // source class id -> episode label
  std::vector<int> masked_base;  // base labels hidden for fake-novel episodes
  std::size_t num_base_classes = 0;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::uint64_t seed = 0;
};

struct EpisodeSpec {
  Phase phase = Phase::kMetaTrain;
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t q_per_class = 5;
  // Draw meta-training novel classes from base/train and mask them.
  bool fake_novel = false;
  // Base queries from n_way randomly chosen base classes, q_per_class each,
  // instead of uniformly over the pooled base split. Used by the analyses.
  bool balanced_base = false;
  // Feature length D; N >= D is rejected when set.
  std::size_t feature_dim = 0;
};

Episode sample_episode(const DatasetSplits& splits, const EpisodeSpec& spec, std::uint64_t seed);

// Deterministic per-episode seed derivation (splitmix64 of base and index).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

}  // namespace xtar
