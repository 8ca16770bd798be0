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
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xtar/data.hpp"
#include "xtar/networks.hpp"
#include "xtar/optim.hpp"
#include "xtar/pipeline.hpp"

namespace xtar {

// ---- pretraining ----------------------------------------------------------

struct PretrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  SgdOptions sgd{.learning_rate = 0.05, .momentum = 0.9, .weight_decay = 5e-4,
                 .decay_every = 1000000, .decay_factor = 0.1};
  std::uint64_t seed = 0;
};

// Squared-distance logits have a much larger gradient scale than cosine
// logits, so the euclidean head starts at a lower rate.
PretrainConfig default_pretrain_config(MetricMode metric);

struct PretrainReport {
  std::size_t steps = 0;
  std::vector<double> loss_history;  // one entry per minibatch step
  double train_accuracy = 0.0;       // percent, base/train
  double val_accuracy = 0.0;         // percent, base/val
};

// Base-class logits of the pretraining head: -||w_i - f||^2 (euclidean) or
// tau * cos(w_i, f) (cosine). `feature` is [B, D].
ad::Var base_head_logits(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& feature);

// Percent of samples in `split` whose head argmax is their class.
double base_accuracy(const ParamStore& params, const NetworkConfig& cfg,
                     const DatasetSplits& splits, Split split);

/// Supervised minibatch training of the backbone and base classifier on
/// base/train. Updates `params` in place.
PretrainReport pretrain(ParamStore& params, const NetworkConfig& cfg, const DatasetSplits& splits,
                        const PretrainConfig& config);

// ---- meta-training --------------------------------------------------------

struct MetaConfig {
  std::size_t episodes = 2000;
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t q_per_class = 5;
  bool fake_novel = false;
  SgdOptions sgd{.learning_rate = 0.1, .momentum = 0.9, .weight_decay = 3e-3,
                 .decay_every = 4000, .decay_factor = 0.1};
  std::size_t val_every = 250;
  std::size_t val_episodes = 100;
  StageFlags stages;
  std::uint64_t seed = 0;
};

struct MetaTrainReport {
  std::vector<double> loss_history;                         // per episode
  std::vector<std::pair<std::size_t, double>> val_history;  // (episodes done, joint %)
  std::size_t best_episode = 0;
  double best_val_accuracy = 0.0;
  OptimizerState optimizer;
};

/// Episodic training of the meta modules selected by `config.stages` (plus
/// TapNet references or the LwoF generator when that variant is active).
/// The backbone, base weights and tau are never touched. On return `params`
/// holds the snapshot with the best validation joint accuracy.
MetaTrainReport meta_train(ParamStore& params, const NetworkConfig& cfg,
                           const DatasetSplits& splits, const MetaConfig& config);

// ---- evaluation -----------------------------------------------------------

struct EvalConfig {
  Phase phase = Phase::kTest;
  std::size_t episodes = 2000;
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t q_per_class = 5;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: hardware concurrency; XTAR_THREADS caps either way
  StageFlags stages;
};

struct EpisodeRecord {
  std::size_t episode_id = 0;
  std::uint64_t seed = 0;
  double joint = 0;      // all percentages
  double base_ind = 0;
  double novel_ind = 0;
  double delta_a = 0;
  double delta_b = 0;
};

struct MetricsReport {
  std::size_t episodes = 0;
  double joint_accuracy = 0;
  double joint_ci95 = 0;  // half-width, 1.96 * stderr
  double base_individual = 0;
  double novel_individual = 0;
  double delta_a = 0;
  double delta_b = 0;
  double delta = 0;
  std::vector<EpisodeRecord> records;
};

// Scores one episode. `logits` rows are the base queries followed by the
// novel queries; columns are base classes first, then novel classes.
EpisodeRecord score_episode(const Tensor& logits, std::span<const std::size_t> targets,
                            std::size_t base_columns, std::size_t base_queries);

MetricsReport summarize(std::vector<EpisodeRecord> records);

std::size_t evaluation_threads(std::size_t requested);

// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

MetricsReport evaluate(const ParamStore& params, const NetworkConfig& cfg,
                       const DatasetSplits& splits, const EvalConfig& config);

// ---- ablation -------------------------------------------------------------

// Baseline, +MetaCNN, +MergeNet, +TconNet.
std::vector<StageFlags> ablation_prefixes();
bool is_stage_prefix(const StageFlags& s);
std::string stage_label(const StageFlags& s);

struct AblationRun {
  StageFlags stages;
  ParamStore params;
  MetaTrainReport training;
  MetricsReport metrics;
};

/// Retrains the meta modules from `pretrained` for every stage set and
/// evaluates each. Stage sets must be cumulative prefixes.
std::vector<AblationRun> run_ablation(const ParamStore& pretrained, const NetworkConfig& cfg,
                                      const DatasetSplits& splits, const MetaConfig& meta,
                                      const EvalConfig& eval, std::span<const StageFlags> stages);

// ---- output ---------------------------------------------------------------

nlohmann::json to_json(const MetricsReport& report, bool include_records = false);
nlohmann::json to_json(const PretrainReport& report);
nlohmann::json to_json(const MetaTrainReport& report);
void write_episode_csv(std::ostream& os, const std::vector<EpisodeRecord>& records);

}  // namespace xtar
