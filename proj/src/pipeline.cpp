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

#include "xtar/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "xtar/error.hpp"
#include "xtar/linalg.hpp"
#include "xtar/loss.hpp"

namespace xtar {

std::size_t TaskState::column_of(int label) const {
  for (std::size_t i = 0; i < column_labels.size(); ++i)
    if (column_labels[i] == label) return i;
  fail(ErrorCode::kInvalidArgument, "label " + std::to_string(label) + " has no classifier column");
}

ad::Var combine_features(const ad::Var& f, const ad::Var& g, const ad::Var& omega_pre,
                         const ad::Var& omega_meta) {
  return ad::add(ad::mul_row(f, omega_pre), ad::mul_row(g, omega_meta));
}

ad::Var class_means(const ad::Var& z, std::span<const int> labels, std::span<const int> classes) {
  require(labels.size() == z.rows(), ErrorCode::kShapeMismatch, "one label per row required");
  Tensor avg({classes.size(), labels.size()}, 0.0);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::size_t count = 0;
    for (int l : labels) count += l == classes[k];
    require(count > 0, ErrorCode::kInvalidArgument,
            "class " + std::to_string(classes[k]) + " has no samples");
    for (std::size_t s = 0; s < labels.size(); ++s)
      if (labels[s] == classes[k]) avg.at(k, s) = 1.0 / static_cast<double>(count);
  }
  return ad::matmul(z.tape()->constant(std::move(avg)), z);
}

ad::Var condition_base(const ad::Var& base_weights, const ad::Var& gamma, const ad::Var& beta) {
  return ad::add_row(ad::mul_row(base_weights, ad::add_scalar(gamma, 1.0)), beta);
}

ad::Var adapt_novel(const ad::Var& initial_novel, const ad::Var& lambda,
                    const ad::Var& conditioned_base) {
  require(lambda.cols() == conditioned_base.rows() && lambda.rows() == initial_novel.rows(),
          ErrorCode::kShapeMismatch, "adapt_novel: lambda must be [N, N_b]");
  return ad::sub(initial_novel, ad::matmul(ad::softmax_rows(lambda), conditioned_base));
}

Tensor alignment_errors(const Tensor& novel_weights, const Tensor& prototypes) {
  require(novel_weights.shape() == prototypes.shape() && novel_weights.rank() == 2,
          ErrorCode::kShapeMismatch, "alignment errors need matching [N, D] inputs");
  const std::size_t n = novel_weights.rows(), d = novel_weights.cols();
  Tensor eps({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const double nw = std::sqrt(squared_norm(novel_weights.row(i)));
    const double nc = std::sqrt(squared_norm(prototypes.row(i)));
    require(nw >= 1e-12, ErrorCode::kInvalidArgument,
            "zero-norm novel classifier weight in row " + std::to_string(i));
    require(nc >= 1e-12, ErrorCode::kInvalidArgument,
            "zero-norm prototype in row " + std::to_string(i));
    for (std::size_t j = 0; j < d; ++j)
      eps.at(i, j) = novel_weights.at(i, j) / nw - prototypes.at(i, j) / nc;
  }
  return eps;
}

Tensor alignment_projection(const Tensor& novel_weights, const Tensor& prototypes) {
  return null_space(alignment_errors(novel_weights, prototypes));
}

namespace {

ad::Var gather_cols(const ad::Var& a, std::span<const std::size_t> cols) {
  return ad::transpose(ad::gather_rows(ad::transpose(a), cols));
}

struct Features {
  ad::Var f;
  ad::Var g;
};

Features extract(ParamBinder& p, const NetworkConfig& cfg, const Tensor& inputs,
                 const PipelineOptions& opts) {
  BackboneOutput bo = backbone_forward(p, cfg, inputs);
  ad::Var g = opts.stages.metacnn
                  ? metacnn_forward(p, cfg, bo.tap)
                  : p.tape().constant(Tensor({inputs.dim(0), cfg.feature_dim}, 0.0));
  return {bo.feature, g};
}

}  // namespace

TaskState process_support(ParamBinder& p, const NetworkConfig& cfg, const Episode& episode,
                          const PipelineOptions& opts) {
  const std::size_t nb = cfg.num_base_classes, n = episode.n_way, D = cfg.feature_dim;
  require(episode.num_base_classes == nb, ErrorCode::kShapeMismatch,
          "episode and model disagree on the number of base classes");
  require(episode.support.size() > 0, ErrorCode::kInvalidArgument, "empty support set");
  if (cfg.metric == MetricMode::kEuclideanProjected)
    require(D > n, ErrorCode::kInvalidArgument, "projection needs D > N");
  ad::Tape& tape = p.tape();

  TaskState t;
  t.metric = cfg.metric;
  t.num_base_classes = nb;
  t.n_way = n;
  for (std::size_t i = 0; i < nb; ++i)
    if (!std::binary_search(episode.masked_base.begin(), episode.masked_base.end(),
                            static_cast<int>(i + 1)))
      t.active_base.push_back(i);
  std::vector<int> novel_labels;
  for (std::size_t k = 0; k < n; ++k) novel_labels.push_back(static_cast<int>(nb + 1 + k));
  for (auto i : t.active_base) t.column_labels.push_back(static_cast<int>(i + 1));
  t.column_labels.insert(t.column_labels.end(), novel_labels.begin(), novel_labels.end());

  // Support features and the task representation.
  const Features fs = extract(p, cfg, episode.support.inputs, opts);
  t.c = ad::mean_rows(ad::concat_cols(fs.f, fs.g));
  if (opts.stages.mergenet) {
    Mixture mix = mergenet_forward(p, cfg, t.c);
    t.omega_pre = mix.omega_pre;
    t.omega_meta = mix.omega_meta;
  } else {
    t.omega_pre = tape.constant(Tensor({1, D}, 1.0));
    t.omega_meta = tape.constant(Tensor({1, D}, 1.0));
  }
  const ad::Var z = combine_features(fs.f, fs.g, t.omega_pre, t.omega_meta);
  t.prototypes = class_means(z, episode.support.labels, novel_labels);
  t.c_star = ad::mean_rows(t.prototypes);

  // Base classifier conditioning.
  const ad::Var base = p.get("classifier.base_weights");
  require(base.rows() == nb && base.cols() == D, ErrorCode::kShapeMismatch,
          "base weights must be [N_b, D]");
  t.base_conditioned = opts.stages.tconnet
                           ? condition_base(base, tconnet_gamma(p, cfg, t.c_star),
                                            tconnet_beta(p, cfg, t.c_star))
                           : base;

  // Initial novel classifier.
  switch (cfg.variant) {
    case NovelVariant::kImprint:
      t.novel_initial = t.prototypes;
      break;
    case NovelVariant::kTapNet: {
      t.novel_initial = p.get("tapnet.refs");
      require(t.novel_initial.rows() == n, ErrorCode::kShapeMismatch,
              "TapNet reference count differs from the episode's N");
      break;
    }
    case NovelVariant::kLwoF: {
      const bool masked = t.active_base.size() != nb;
      t.novel_initial =
          lwof_generate(p, cfg, t.prototypes, base,
                        masked ? std::span<const std::size_t>(t.active_base)
                               : std::span<const std::size_t>())
              .weights;
      break;
    }
  }

  // Novel classifier adaptation against the active conditioned base rows.
  const bool masked = t.active_base.size() != nb;
  const ad::Var base_active =
      masked ? ad::gather_rows(t.base_conditioned, t.active_base) : t.base_conditioned;
  if (opts.stages.tconnet) {
    ad::Var sigma = ad::matmul(t.prototypes, ad::transpose(t.base_conditioned));
    if (masked) {
      Tensor keep({n, nb}, 0.0);
      for (std::size_t k = 0; k < n; ++k)
        for (auto i : t.active_base) keep.at(k, i) = 1.0;
      sigma = ad::mul(sigma, tape.constant(std::move(keep)));
    }
    ad::Var lambda = tconnet_lambda(p, cfg, sigma);
    if (masked) lambda = gather_cols(lambda, t.active_base);
    t.novel_adapted = adapt_novel(t.novel_initial, lambda, base_active);
  } else {
    t.novel_adapted = t.novel_initial;
  }

  const ad::Var rows[] = {base_active, t.novel_adapted};
  t.w_star = ad::concat_rows(rows);

  if (cfg.metric == MetricMode::kEuclideanProjected) {
    t.projection = opts.fixed_projection
                       ? *opts.fixed_projection
                       : alignment_projection(t.novel_adapted.value(), t.prototypes.value());
    require(t.projection->rows() == D, ErrorCode::kShapeMismatch, "projection must have D rows");
  } else {
    t.tau = p.get("classifier.tau");
  }
  return t;
}

QueryFeatures query_features(ParamBinder& p, const NetworkConfig& cfg, const TaskState& task,
                             const Tensor& inputs, const PipelineOptions& opts) {
  const Features fs = extract(p, cfg, inputs, opts);
  QueryFeatures q;
  q.raw_base = fs.f;
  q.base = ad::mul_row(fs.f, task.omega_pre);
  q.novel = ad::mul_row(fs.g, task.omega_meta);
  q.combined = ad::add(q.base, q.novel);
  return q;
}

ad::Var class_logits(const TaskState& task, const ad::Var& z) {
  if (task.metric == MetricMode::kCosine) {
    const ad::Var cos =
        ad::matmul(ad::row_normalize(z), ad::transpose(ad::row_normalize(task.w_star)));
    return ad::scale_by(cos, task.tau);
  }
  require(task.projection.has_value(), ErrorCode::kState, "euclidean mode needs a projection");
  const ad::Var m = z.tape()->constant(*task.projection);
  return ad::scale(ad::sq_distances(ad::matmul(z, m), ad::matmul(task.w_star, m)), -1.0);
}

std::vector<std::vector<double>> posteriors(const TaskState& task, const ad::Var& logits) {
  const Tensor& lv = logits.value();
  std::vector<std::vector<double>> out;
  out.reserve(lv.rows());
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    const auto p = softmax(lv.row(r));
    std::vector<double> full(task.num_classes(), 0.0);
    for (std::size_t c = 0; c < p.size(); ++c)
      full[static_cast<std::size_t>(task.column_labels[c] - 1)] = p[c];
    out.push_back(std::move(full));
  }
  return out;
}

std::vector<std::vector<double>> classify(ParamBinder& p, const NetworkConfig& cfg,
                                          const TaskState& task, const Tensor& inputs,
                                          const PipelineOptions& opts) {
  const QueryFeatures q = query_features(p, cfg, task, inputs, opts);
  return posteriors(task, class_logits(task, q.combined));
}

EpisodeLoss episode_loss(ParamBinder& p, const NetworkConfig& cfg, const Episode& episode,
                         const PipelineOptions& opts) {
  EpisodeLoss out{process_support(p, cfg, episode, opts), {}, {}};
  const Tensor parts[] = {episode.query_base.inputs, episode.query_novel.inputs};
  const Tensor queries = concat_rows(parts);
  std::vector<std::size_t> targets;
  targets.reserve(queries.dim(0));
  for (int l : episode.query_base.labels) targets.push_back(out.task.column_of(l));
  for (int l : episode.query_novel.labels) targets.push_back(out.task.column_of(l));
  const QueryFeatures q = query_features(p, cfg, out.task, queries, opts);
  out.logits = class_logits(out.task, q.combined);
  out.loss = ad::cross_entropy(out.logits, targets);
  return out;
}

}  // namespace xtar
