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

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xtar/data.hpp"
#include "xtar/networks.hpp"
#include "xtar/pipeline.hpp"

namespace xtar {

enum class SseMode : std::uint8_t { kTar, kBaseOnly };

// sum over rows x of ||centroid - x||^2
double sse(const Tensor& features, std::span<const double> centroid);
// sse[k] / min_{j != k} ||centroids_k - centroids_j||^2; a zero denominator is an error.
std::vector<double> nsse(std::span<const double> sse, const Tensor& centroids);

// Mean cross entropy and Shannon entropy (natural log) over rows of posteriors.
struct EntropyStats {
  double cross_entropy = 0;
  double shannon = 0;
};
EntropyStats entropy_of(const std::vector<std::vector<double>>& posteriors,
                        std::span<const int> labels);

struct AnalysisConfig {
  Phase phase = Phase::kTest;
  std::size_t episodes = 600;
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t q_per_class = 50;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

struct ClusterReport {
  double base_sse = 0;
  double base_nsse = 0;
  double novel_sse = 0;
  double novel_nsse = 0;
  std::size_t episodes = 0;
};

struct EntropyReport {
  double base_cross_entropy = 0;
  double base_shannon = 0;
  double novel_cross_entropy = 0;
  double novel_shannon = 0;
  std::size_t episodes = 0;
};

// Per-episode analysis of one method. kTar uses combined features with the
// prototypes and conditioned base weights as centroids; kBaseOnly uses raw
// backbone features with base-feature prototypes and pretrained base weights.
struct EpisodeAnalysis {
  std::vector<int> classes;      // labels that have queries, base first
  std::vector<double> sse;       // per entry of `classes`
  std::vector<double> nsse;
  EntropyStats base_entropy;
  EntropyStats novel_entropy;
};
EpisodeAnalysis analyze_episode(const ParamStore& params, const NetworkConfig& cfg,
                                const Episode& episode, const StageFlags& stages, SseMode mode);

// Group means of one episode.
struct AnalysisRecord {
  std::size_t episode_id = 0;
  std::uint64_t seed = 0;
  double base_sse = 0, base_nsse = 0, novel_sse = 0, novel_nsse = 0;
  EntropyStats base_entropy, novel_entropy;
};

struct AnalysisReport {
  ClusterReport clusters;
  EntropyReport entropy;
  std::vector<AnalysisRecord> records;
};
// Averages per-class values within each group, then over episodes. Base
// queries are balanced: n_way base classes with q_per_class queries each.
AnalysisReport analyze(const ParamStore& params, const NetworkConfig& cfg,
                       const DatasetSplits& splits, const AnalysisConfig& config,
                       const StageFlags& stages, SseMode mode);

// (after - before) / before
double reduction_ratio(double before, double after);

nlohmann::json to_json(const AnalysisReport& r);
// Rows: method; columns SSE/nSSE (or E/H) for base then novel, plus a
// reduction-ratio row comparing `after` against `before`.
void write_cluster_table(std::ostream& os, const std::string& before_name, const ClusterReport& before,
                         const std::string& after_name, const ClusterReport& after);
void write_analysis_csv(std::ostream& os, const std::vector<AnalysisRecord>& records);
void write_entropy_table(std::ostream& os, const std::string& before_name, const EntropyReport& before,
                         const std::string& after_name, const EntropyReport& after);

/// Writes the weighted base, weighted novel and combined query features, the
/// query labels and the classifier rows of one episode as XTDS tensors plus
/// index.json in `dir`. Returns the index path.
std::filesystem::path export_features(const ParamStore& params, const NetworkConfig& cfg,
                                      const Episode& episode, const StageFlags& stages,
                                      const std::filesystem::path& dir);

}  // namespace xtar
