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

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xtar/analysis.hpp"
#include "xtar/data.hpp"
#include "xtar/networks.hpp"
#include "xtar/optim.hpp"
#include "xtar/training.hpp"

namespace xtar {

// Flat experiment description. Every key has a default; to_json writes all of
// them, so a resolved config alone reproduces a run.
struct ExperimentConfig {
  // Dataset: a manifest path, or the synthetic generator when empty.
  std::string data_manifest;
  SyntheticConfig synthetic;

  // Model.
  BackboneKind backbone = BackboneKind::kFullyConnected;
  std::size_t hidden = 128;
  std::size_t num_blocks = 4;
  std::size_t tap_index = 3;
  std::size_t feature_dim = 64;
  std::size_t mergenet_depth = 4;
  NovelVariant variant = NovelVariant::kImprint;
  MetricMode metric = MetricMode::kCosine;
  double cosine_scale_init = 10.0;
  StageFlags stages;

  // Pretraining; a negative rate picks the metric's default.
  std::size_t pretrain_epochs = 40;
  std::size_t pretrain_batch_size = 32;
  double pretrain_lr = -1.0;
  double pretrain_momentum = 0.9;
  double pretrain_weight_decay = 5e-4;

  // Episodes and meta-training.
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t q_per_class = 5;
  bool fake_novel = false;
  std::size_t meta_episodes = 2000;
  double meta_lr = 0.1;
  double meta_momentum = 0.9;
  double meta_weight_decay = 3e-3;
  std::uint64_t meta_decay_every = 4000;
  double meta_decay_factor = 0.1;
  std::size_t val_every = 250;
  std::size_t val_episodes = 100;

  // Evaluation and analysis.
  Phase eval_phase = Phase::kTest;
  std::size_t eval_episodes = 2000;
  std::size_t analysis_episodes = 600;
  std::size_t analysis_q_per_class = 50;
  std::size_t threads = 0;

  // Seeds: data generation, parameter init, episode streams.
  std::uint64_t data_seed = 0;
  std::uint64_t init_seed = 0;
  std::uint64_t episode_seed = 0;

  std::string output_dir = "xtar-out";

  // Throws kInvalidArgument on the first inconsistent field.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
// Starts from defaults; unknown keys and wrongly typed values are errors.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
// FNV-1a over the compact resolved config, leaving out keys that only affect
// evaluation, analysis or output placement.
std::uint64_t config_hash(const ExperimentConfig& c);

NetworkConfig network_config(const ExperimentConfig& c, const DatasetSplits& splits);
PretrainConfig pretrain_config(const ExperimentConfig& c);
MetaConfig meta_config(const ExperimentConfig& c);
EvalConfig eval_config(const ExperimentConfig& c);
AnalysisConfig analysis_config(const ExperimentConfig& c);
DatasetSplits load_data(const ExperimentConfig& c);

// ---- checkpoints ----------------------------------------------------------

// "XTCK", u32 version, u64 config hash, u64 episode counter, u32-prefixed
// config JSON, u32 parameter count, records, optimizer block. Records are a
// u32-prefixed name followed by a u64-prefixed XTDS array. Little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParamStore params;
  OptimizerState optimizer;
  std::uint64_t episode = 0;
  std::uint64_t config_hash = 0;
  std::string config_json;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ck);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
// kCorrupt ("corrupt checkpoint: ...") on bad magic or short data,
// kVersionMismatch on an unknown version.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- drivers --------------------------------------------------------------

// Each driver writes resolved-config.json, summary.json and run-info.json
// (timing only) into `out`, plus its per-episode CSV and tables. Warnings
// (for instance a checkpoint made under another config) go to `warnings`.
struct RunResult {
  nlohmann::json summary;
  std::vector<std::string> warnings;
  std::vector<std::filesystem::path> files;
};

RunResult run_synth(const ExperimentConfig& c);
RunResult run_pretrain(const ExperimentConfig& c);
RunResult run_meta_train(const ExperimentConfig& c, const std::filesystem::path& pretrained);
RunResult run_eval(const ExperimentConfig& c, const std::filesystem::path& checkpoint);
RunResult run_ablate(const ExperimentConfig& c, const std::filesystem::path& pretrained);
// Compares the configured stages against the all-off baseline on the same
// checkpoint, since meta-training leaves the backbone and base weights alone.
RunResult run_analyze(const ExperimentConfig& c, const std::filesystem::path& checkpoint);
RunResult run_export(const ExperimentConfig& c, const std::filesystem::path& checkpoint,
                     std::size_t episode_index);

}  // namespace xtar
