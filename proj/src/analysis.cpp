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

#include "xtar/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include "xtar/error.hpp"
#include "xtar/linalg.hpp"
#include "xtar/loss.hpp"
#include "xtar/tensor_io.hpp"
#include "xtar/training.hpp"

namespace xtar {

double sse(const Tensor& features, std::span<const double> centroid) {
  require(features.rank() == 2 && features.rows() > 0, ErrorCode::kInvalidArgument,
          "SSE needs a non-empty class group");
  require(features.cols() == centroid.size(), ErrorCode::kShapeMismatch,
          "centroid length differs from feature length");
  double total = 0;
  for (std::size_t r = 0; r < features.rows(); ++r)
    for (std::size_t j = 0; j < centroid.size(); ++j) {
      const double d = centroid[j] - features.at(r, j);
      total += d * d;
    }
  return total;
}

std::vector<double> nsse(std::span<const double> sse, const Tensor& centroids) {
  require(centroids.rows() >= 2, ErrorCode::kInvalidArgument, "nSSE needs at least two centroids");
  require(sse.size() <= centroids.rows(), ErrorCode::kShapeMismatch,
          "more SSE values than centroids");
  std::vector<double> out(sse.size());
  for (std::size_t k = 0; k < sse.size(); ++k) {
    double nearest = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < centroids.rows(); ++j) {
      if (j == k) continue;
      double d = 0;
      for (std::size_t c = 0; c < centroids.cols(); ++c) {
        const double v = centroids.at(k, c) - centroids.at(j, c);
        d += v * v;
      }
      nearest = std::min(nearest, d);
    }
    require(nearest > 0.0, ErrorCode::kInvalidArgument,
            "duplicate centroids make nSSE undefined (class " + std::to_string(k) + ")");
    out[k] = sse[k] / nearest;
  }
  return out;
}

EntropyStats entropy_of(const std::vector<std::vector<double>>& posteriors,
                        std::span<const int> labels) {
  require(posteriors.size() == labels.size() && !labels.empty(), ErrorCode::kInvalidArgument,
          "entropy needs one label per posterior row");
  EntropyStats s;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const auto& p = posteriors[r];
    const double pt = p.at(static_cast<std::size_t>(labels[r] - 1));
    require(pt > 0.0, ErrorCode::kInvalidArgument, "zero posterior on the true class");
    s.cross_entropy -= std::log(pt);
    for (double v : p)
      if (v > 0.0) s.shannon -= v * std::log(v);
  }
  s.cross_entropy /= static_cast<double>(labels.size());
  s.shannon /= static_cast<double>(labels.size());
  return s;
}

namespace {

// Log-domain entropies for one logit row: E = lse - z_t, H = lse - sum p z.
void accumulate_entropy(std::span<const double> logits, std::size_t target, EntropyStats& s) {
  const double lse = log_sum_exp(logits);
  double expected = 0;
  for (double z : logits) expected += std::exp(z - lse) * z;
  s.cross_entropy += lse - logits[target];
  s.shannon += lse - expected;
}

Tensor row_means(const Tensor& x, std::span<const int> labels, std::span<const int> classes) {
  Tensor out({classes.size(), x.cols()}, 0.0);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::size_t n = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
      if (labels[r] != classes[k]) continue;
      ++n;
      for (std::size_t j = 0; j < x.cols(); ++j) out.at(k, j) += x.at(r, j);
    }
    require(n > 0, ErrorCode::kInvalidArgument, "class without support samples");
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(k, j) /= static_cast<double>(n);
  }
  return out;
}

// The cosine classifier only sees directions, so clusters are measured on the
// unit sphere in that mode.
Tensor unit_rows(Tensor x, bool normalize) {
  if (!normalize) return x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double n = std::sqrt(squared_norm(x.row(r)));
    require(n > 0.0, ErrorCode::kInvalidArgument, "zero-norm feature in cluster analysis");
    for (std::size_t j = 0; j < x.cols(); ++j) x.at(r, j) /= n;
  }
  return x;
}

Tensor rows_with_label(const Tensor& x, std::span<const int> labels, int label) {
  std::vector<std::size_t> idx;
  for (std::size_t r = 0; r < labels.size(); ++r)
    if (labels[r] == label) idx.push_back(r);
  return x.gather(idx);
}

}  // namespace

EpisodeAnalysis analyze_episode(const ParamStore& params, const NetworkConfig& cfg,
                                const Episode& episode, const StageFlags& stages, SseMode mode) {
  const PipelineOptions opts{.stages = stages, .fixed_projection = std::nullopt};
  ad::Tape tape;
  ParamBinder p(tape, params);
  const TaskState task = process_support(p, cfg, episode, opts);
  const Tensor parts[] = {episode.query_base.inputs, episode.query_novel.inputs};
  const QueryFeatures qf = query_features(p, cfg, task, concat_rows(parts), opts);
  std::vector<int> labels = episode.query_base.labels;
  labels.insert(labels.end(), episode.query_novel.labels.begin(), episode.query_novel.labels.end());

  EpisodeAnalysis out;
  // Entropies over the task's classifier.
  const Tensor logits = class_logits(task, qf.combined).value();
  const std::size_t nb_q = episode.query_base.size();
  for (std::size_t r = 0; r < labels.size(); ++r)
    accumulate_entropy(logits.row(r), task.column_of(labels[r]),
                       r < nb_q ? out.base_entropy : out.novel_entropy);
  auto finish = [](EntropyStats& s, std::size_t n) {
    if (n == 0) return;
    s.cross_entropy /= static_cast<double>(n);
    s.shannon /= static_cast<double>(n);
  };
  finish(out.base_entropy, nb_q);
  finish(out.novel_entropy, labels.size() - nb_q);

  // Centroids over every active class: base rows (by column) then novel.
  const bool tar = mode == SseMode::kTar;
  const bool unit = cfg.metric == MetricMode::kCosine;
  const Tensor features =
      unit_rows(tar ? qf.combined.value() : qf.raw_base.value(), unit);
  std::vector<int> novel_labels;
  for (std::size_t k = 0; k < task.n_way; ++k)
    novel_labels.push_back(static_cast<int>(task.num_base_classes + 1 + k));
  Tensor novel_centroids;
  if (tar) {
    novel_centroids = task.prototypes.value();
  } else {
    const BackboneOutput bo = backbone_forward(p, cfg, episode.support.inputs);
    novel_centroids = row_means(bo.feature.value(), episode.support.labels, novel_labels);
  }
  const Tensor base_all = tar ? task.base_conditioned.value() : params.at("classifier.base_weights");
  const Tensor centroid_parts[] = {base_all.gather(task.active_base), novel_centroids};
  const Tensor centroids = unit_rows(concat_rows(centroid_parts), unit);

  std::set<int> base_present(episode.query_base.labels.begin(), episode.query_base.labels.end());
  out.classes.assign(base_present.begin(), base_present.end());
  out.classes.insert(out.classes.end(), novel_labels.begin(), novel_labels.end());

  // nSSE needs SSE values in centroid order; compute for all present classes
  // and map through column indices.
  std::vector<double> sse_by_column(centroids.rows(), 0.0);
  std::vector<std::size_t> columns;
  for (int label : out.classes) {
    const std::size_t col = task.column_of(label);
    const double v = sse(rows_with_label(features, labels, label), centroids.row(col));
    out.sse.push_back(v);
    sse_by_column[col] = v;
    columns.push_back(col);
  }
  const std::vector<double> all_nsse = nsse(sse_by_column, centroids);
  for (std::size_t col : columns) out.nsse.push_back(all_nsse[col]);
  return out;
}

AnalysisReport analyze(const ParamStore& params, const NetworkConfig& cfg,
                       const DatasetSplits& splits, const AnalysisConfig& config,
                       const StageFlags& stages, SseMode mode) {
  require(config.episodes > 0, ErrorCode::kInvalidArgument, "analysis needs episodes");
  const EpisodeSpec spec{.phase = config.phase,
                         .n_way = config.n_way,
                         .k_shot = config.k_shot,
                         .q_per_class = config.q_per_class,
                         .fake_novel = false,
                         .balanced_base = true,
                         .feature_dim = cfg.feature_dim};
  std::vector<EpisodeAnalysis> per(config.episodes);
  parallel_for(config.episodes, evaluation_threads(config.threads), [&](std::size_t i) {
    const Episode ep = sample_episode(splits, spec, derive_seed(config.seed, i));
    per[i] = analyze_episode(params, cfg, ep, stages, mode);
  });

  AnalysisReport r;
  const double n = static_cast<double>(config.episodes);
  for (std::size_t i = 0; i < per.size(); ++i) {
    const EpisodeAnalysis& e = per[i];
    AnalysisRecord rec;
    rec.episode_id = i;
    rec.seed = derive_seed(config.seed, i);
    std::size_t nb = 0, nv = 0;
    for (std::size_t k = 0; k < e.classes.size(); ++k) {
      if (static_cast<std::size_t>(e.classes[k]) <= cfg.num_base_classes) {
        rec.base_sse += e.sse[k], rec.base_nsse += e.nsse[k], ++nb;
      } else {
        rec.novel_sse += e.sse[k], rec.novel_nsse += e.nsse[k], ++nv;
      }
    }
    if (nb) rec.base_sse /= nb, rec.base_nsse /= nb;
    if (nv) rec.novel_sse /= nv, rec.novel_nsse /= nv;
    rec.base_entropy = e.base_entropy;
    rec.novel_entropy = e.novel_entropy;
    r.clusters.base_sse += rec.base_sse / n;
    r.clusters.base_nsse += rec.base_nsse / n;
    r.clusters.novel_sse += rec.novel_sse / n;
    r.clusters.novel_nsse += rec.novel_nsse / n;
    r.entropy.base_cross_entropy += rec.base_entropy.cross_entropy / n;
    r.entropy.base_shannon += rec.base_entropy.shannon / n;
    r.entropy.novel_cross_entropy += rec.novel_entropy.cross_entropy / n;
    r.entropy.novel_shannon += rec.novel_entropy.shannon / n;
    r.records.push_back(rec);
  }
  r.clusters.episodes = r.entropy.episodes = config.episodes;
  return r;
}

double reduction_ratio(double before, double after) {
  require(before != 0.0, ErrorCode::kInvalidArgument, "reduction ratio against zero");
  return (after - before) / before;
}

nlohmann::json to_json(const AnalysisReport& r) {
  return {{"episodes", r.clusters.episodes},
          {"sse", {{"base", r.clusters.base_sse}, {"novel", r.clusters.novel_sse}}},
          {"nsse", {{"base", r.clusters.base_nsse}, {"novel", r.clusters.novel_nsse}}},
          {"cross_entropy",
           {{"base", r.entropy.base_cross_entropy}, {"novel", r.entropy.novel_cross_entropy}}},
          {"shannon_entropy", {{"base", r.entropy.base_shannon}, {"novel", r.entropy.novel_shannon}}}};
}

namespace {

void table_row(std::ostream& os, const std::string& name, std::initializer_list<double> values,
               const char* fmt) {
  os << name;
  char buf[64];
  for (double v : values) {
    std::snprintf(buf, sizeof buf, fmt, v);
    os << ',' << buf;
  }
  os << '\n';
}

}  // namespace

void write_cluster_table(std::ostream& os, const std::string& before_name, const ClusterReport& b,
                         const std::string& after_name, const ClusterReport& a) {
  os << "method,base_sse,base_nsse,novel_sse,novel_nsse\n";
  table_row(os, before_name, {b.base_sse, b.base_nsse, b.novel_sse, b.novel_nsse}, "%.6f");
  table_row(os, after_name, {a.base_sse, a.base_nsse, a.novel_sse, a.novel_nsse}, "%.6f");
  table_row(os, "reduction_ratio",
            {reduction_ratio(b.base_sse, a.base_sse), reduction_ratio(b.base_nsse, a.base_nsse),
             reduction_ratio(b.novel_sse, a.novel_sse), reduction_ratio(b.novel_nsse, a.novel_nsse)},
            "%.6f");
}

void write_analysis_csv(std::ostream& os, const std::vector<AnalysisRecord>& records) {
  os << "episode_id,seed,base_sse,base_nsse,novel_sse,novel_nsse,base_cross_entropy,"
        "base_shannon,novel_cross_entropy,novel_shannon\n";
  for (const auto& r : records)
    table_row(os, std::to_string(r.episode_id) + ',' + std::to_string(r.seed),
              {r.base_sse, r.base_nsse, r.novel_sse, r.novel_nsse, r.base_entropy.cross_entropy,
               r.base_entropy.shannon, r.novel_entropy.cross_entropy, r.novel_entropy.shannon},
              "%.6f");
}

void write_entropy_table(std::ostream& os, const std::string& before_name, const EntropyReport& b,
                         const std::string& after_name, const EntropyReport& a) {
  os << "method,base_cross_entropy,base_shannon,novel_cross_entropy,novel_shannon\n";
  table_row(os, before_name,
            {b.base_cross_entropy, b.base_shannon, b.novel_cross_entropy, b.novel_shannon}, "%.6f");
  table_row(os, after_name,
            {a.base_cross_entropy, a.base_shannon, a.novel_cross_entropy, a.novel_shannon}, "%.6f");
  table_row(os, "reduction_ratio",
            {reduction_ratio(b.base_cross_entropy, a.base_cross_entropy),
             reduction_ratio(b.base_shannon, a.base_shannon),
             reduction_ratio(b.novel_cross_entropy, a.novel_cross_entropy),
             reduction_ratio(b.novel_shannon, a.novel_shannon)},
            "%.6f");
}

std::filesystem::path export_features(const ParamStore& params, const NetworkConfig& cfg,
                                      const Episode& episode, const StageFlags& stages,
                                      const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec && std::filesystem::is_directory(dir), ErrorCode::kIo,
          "cannot create export directory " + dir.string());
  const PipelineOptions opts{.stages = stages, .fixed_projection = std::nullopt};
  ad::Tape tape;
  ParamBinder p(tape, params);
  const TaskState task = process_support(p, cfg, episode, opts);
  const Tensor parts[] = {episode.query_base.inputs, episode.query_novel.inputs};
  const QueryFeatures qf = query_features(p, cfg, task, concat_rows(parts), opts);

  std::vector<int> labels = episode.query_base.labels;
  labels.insert(labels.end(), episode.query_novel.labels.begin(), episode.query_novel.labels.end());
  Tensor label_tensor({labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) label_tensor[i] = labels[i];

  const std::pair<const char*, const Tensor*> files[] = {
      {"weighted_base.xtds", &qf.base.value()},
      {"weighted_novel.xtds", &qf.novel.value()},
      {"combined.xtds", &qf.combined.value()},
      {"labels.xtds", &label_tensor},
      {"classifier.xtds", &task.w_star.value()},
      {"prototypes.xtds", &task.prototypes.value()},
  };
  nlohmann::json index{{"format", "xtar-features"},
                       {"version", 1},
                       {"episode_seed", episode.seed},
                       {"num_base_classes", task.num_base_classes},
                       {"n_way", task.n_way},
                       {"labels", labels},
                       {"classifier_labels", task.column_labels},
                       {"omega_pre", task.omega_pre.value().values()},
                       {"omega_meta", task.omega_meta.value().values()}};
  for (const auto& [name, t] : files) {
    save_xtds(dir / name, *t);
    index["files"][std::string(name).substr(0, std::string(name).size() - 5)] = {
        {"path", name}, {"shape", t->shape()}};
  }
  const auto path = dir / "index.json";
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + path.string());
  os << index.dump(2) << '\n';
  return path;
}

}  // namespace xtar
