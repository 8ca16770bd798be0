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

#include <optional>
#include <span>
#include <vector>

#include "xtar/autodiff.hpp"
#include "xtar/data.hpp"
#include "xtar/networks.hpp"

namespace xtar {

struct PipelineOptions {
  StageFlags stages;
  // Replaces the per-episode projection. Lets finite-difference checks hold
  // the (stop-gradient) projection fixed.
  std::optional<Tensor> fixed_projection;
};

/// Everything derived from one support set. Vars live on the binder's tape.
struct TaskState {
  ad::Var c;                 // [1, 2D] mean concatenated (base, novel) feature
  ad::Var omega_pre;         // [1, D]
  ad::Var omega_meta;        // [1, D]
  ad::Var prototypes;        // [N, D] per-class mean combined feature, ordered by label
  ad::Var c_star;            // [1, D] mean prototype
  ad::Var base_conditioned;  // [N_b, D] after scaling/biasing
  ad::Var novel_initial;     // [N, D]
  ad::Var novel_adapted;     // [N, D]
  ad::Var w_star;            // [columns, D] active base rows then novel rows
  ad::Var tau;               // cosine scale (cosine mode only)
  std::optional<Tensor> projection;  // [D, D-N], euclidean mode only
  MetricMode metric = MetricMode::kCosine;
  std::vector<int> column_labels;       // episode label of each w_star row
  std::vector<std::size_t> active_base; // 0-based base rows present in w_star
  std::size_t num_base_classes = 0;
  std::size_t n_way = 0;

  std::size_t num_classes() const { return num_base_classes + n_way; }
  // Column of w_star for an episode label; throws for masked labels.
  std::size_t column_of(int label) const;
};

// ---- building blocks ------------------------------------------------------

// w_pre * f + w_meta * g, row-wise.
ad::Var combine_features(const ad::Var& f, const ad::Var& g, const ad::Var& omega_pre,
                         const ad::Var& omega_meta);
// Mean of the rows of `z` sharing each label in `classes`, in that order.
ad::Var class_means(const ad::Var& z, std::span<const int> labels, std::span<const int> classes);
// (1 + gamma) * w_i + beta for every row.
ad::Var condition_base(const ad::Var& base_weights, const ad::Var& gamma, const ad::Var& beta);
// w_i - sum_j softmax_j(lambda_i) * w*_j for every novel row i.
ad::Var adapt_novel(const ad::Var& initial_novel, const ad::Var& lambda,
                    const ad::Var& conditioned_base);
// Rows w_n/|w_n| - c_n/|c_n|; zero-norm rows (< 1e-12) are an error.
Tensor alignment_errors(const Tensor& novel_weights, const Tensor& prototypes);
// Null space of the alignment errors: D x (D - N).
Tensor alignment_projection(const Tensor& novel_weights, const Tensor& prototypes);

// ---- episode processing ---------------------------------------------------

TaskState process_support(ParamBinder& p, const NetworkConfig& cfg, const Episode& episode,
                          const PipelineOptions& opts = {});

struct QueryFeatures {
  ad::Var base;      // omega_pre * f(x)
  ad::Var novel;     // omega_meta * g(a(x))
  ad::Var combined;  // z(x)
  ad::Var raw_base;  // f(x)
};
QueryFeatures query_features(ParamBinder& p, const NetworkConfig& cfg, const TaskState& task,
                             const Tensor& inputs, const PipelineOptions& opts = {});

// Scores over the columns of task.w_star: -||(w*_i - z) M||^2 in euclidean
// mode, tau * cos(w*_i, z) in cosine mode.
ad::Var class_logits(const TaskState& task, const ad::Var& z);

// Per-row posteriors over all N_b + N classes (index = label - 1); masked
// base classes get probability zero.
std::vector<std::vector<double>> posteriors(const TaskState& task, const ad::Var& logits);

std::vector<std::vector<double>> classify(ParamBinder& p, const NetworkConfig& cfg,
                                          const TaskState& task, const Tensor& inputs,
                                          const PipelineOptions& opts = {});

struct EpisodeLoss {
  TaskState task;
  ad::Var loss;    // mean cross entropy over Q_base and Q_novel
  ad::Var logits;  // [|Q|, columns], base queries first
};
EpisodeLoss episode_loss(ParamBinder& p, const NetworkConfig& cfg, const Episode& episode,
                         const PipelineOptions& opts = {});

}  // namespace xtar
