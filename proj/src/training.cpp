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

#include "xtar/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <set>
#include <thread>

#include "xtar/error.hpp"
#include "xtar/loss.hpp"

namespace xtar {

namespace {

constexpr std::uint64_t kValidationStream = 0x76616c6964ULL;

struct LabeledRows {
  Tensor inputs;
  std::vector<std::size_t> columns;  // class id - 1
};

LabeledRows stack_split(const DatasetSplits& splits, Split split) {
  std::vector<Tensor> parts;
  LabeledRows out;
  for (const auto& c : splits[split]) {
    parts.push_back(c.samples);
    out.columns.insert(out.columns.end(), c.count(), static_cast<std::size_t>(c.class_id - 1));
  }
  require(!parts.empty(), ErrorCode::kInsufficientData,
          std::string(split_name(split)) + " is empty");
  out.inputs = concat_rows(parts);
  return out;
}

std::set<std::string> as_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

}  // namespace

// ---- pretraining ----------------------------------------------------------

PretrainConfig default_pretrain_config(MetricMode metric) {
  PretrainConfig c;
  if (metric == MetricMode::kEuclideanProjected) c.sgd.learning_rate = 0.01;
  return c;
}

ad::Var base_head_logits(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& feature) {
  const ad::Var w = p.get("classifier.base_weights");
  if (cfg.metric == MetricMode::kCosine) {
    const ad::Var cos = ad::matmul(ad::row_normalize(feature), ad::transpose(ad::row_normalize(w)));
    return ad::scale_by(cos, p.get("classifier.tau"));
  }
  return ad::scale(ad::sq_distances(feature, w), -1.0);
}

double base_accuracy(const ParamStore& params, const NetworkConfig& cfg,
                     const DatasetSplits& splits, Split split) {
  const LabeledRows rows = stack_split(splits, split);
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < rows.columns.size(); b += kChunk) {
    const std::size_t e = std::min(rows.columns.size(), b + kChunk);
    ad::Tape tape;
    ParamBinder p(tape, params);
    const Tensor logits =
        base_head_logits(p, cfg, backbone_forward(p, cfg, rows.inputs.slice(b, e)).feature).value();
    for (std::size_t r = 0; r < e - b; ++r) correct += argmax(logits.row(r)) == rows.columns[b + r];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(rows.columns.size());
}

PretrainReport pretrain(ParamStore& params, const NetworkConfig& cfg, const DatasetSplits& splits,
                        const PretrainConfig& config) {
  require(config.batch_size > 0, ErrorCode::kInvalidArgument, "batch size must be positive");
  require(splits.num_base_classes() == cfg.num_base_classes, ErrorCode::kShapeMismatch,
          "dataset and model disagree on the number of base classes");
  const LabeledRows rows = stack_split(splits, Split::kBaseTrain);
  const auto names = pretrain_parameter_names(cfg);
  const auto trainable = as_set(names);
  OptimizerState opt = make_optimizer(config.sgd);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(rows.columns.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  PretrainReport report;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b,
                                             std::min(config.batch_size, order.size() - b));
      std::vector<std::size_t> targets;
      for (auto i : idx) targets.push_back(rows.columns[i]);
      ad::Tape tape;
      ParamBinder p(tape, params, [&](const std::string& n) { return trainable.contains(n); });
      const ad::Var feature = backbone_forward(p, cfg, rows.inputs.gather(idx)).feature;
      const ad::Var loss = ad::cross_entropy(base_head_logits(p, cfg, feature), targets);
      tape.backward(loss);
      sgd_step(params, p.gradients(names), opt);
      report.loss_history.push_back(loss.value().item());
      ++report.steps;
    }
  }
  report.train_accuracy = base_accuracy(params, cfg, splits, Split::kBaseTrain);
  if (!splits[Split::kBaseVal].empty())
    report.val_accuracy = base_accuracy(params, cfg, splits, Split::kBaseVal);
  return report;
}

// ---- meta-training --------------------------------------------------------

MetaTrainReport meta_train(ParamStore& params, const NetworkConfig& cfg,
                           const DatasetSplits& splits, const MetaConfig& config) {
  require(config.n_way < cfg.feature_dim, ErrorCode::kInvalidArgument, "N must be smaller than D");
  require(config.n_way == cfg.n_way || cfg.variant != NovelVariant::kTapNet,
          ErrorCode::kInvalidArgument, "TapNet reference count must equal the episode N");
  const auto names = meta_parameter_names(cfg, config.stages);
  const auto trainable = as_set(names);

  MetaTrainReport report;
  report.optimizer = make_optimizer(config.sgd);

  EvalConfig val;
  val.phase = Phase::kVal;
  val.episodes = config.val_episodes;
  val.n_way = config.n_way;
  val.k_shot = config.k_shot;
  val.q_per_class = config.q_per_class;
  val.seed = derive_seed(config.seed, kValidationStream);
  val.stages = config.stages;
  const bool validating = config.val_episodes > 0;
  auto validate = [&] { return evaluate(params, cfg, splits, val).joint_accuracy; };

  if (names.empty() || config.episodes == 0) {
    if (validating) {
      report.best_val_accuracy = validate();
      report.val_history.emplace_back(0, report.best_val_accuracy);
    }
    return report;
  }

  ParamStore best = params;
  if (validating) {
    report.best_val_accuracy = validate();
    report.val_history.emplace_back(0, report.best_val_accuracy);
  }

  const EpisodeSpec spec{.phase = Phase::kMetaTrain,
                         .n_way = config.n_way,
                         .k_shot = config.k_shot,
                         .q_per_class = config.q_per_class,
                         .fake_novel = config.fake_novel,
                         .balanced_base = false,
                         .feature_dim = cfg.feature_dim};
  const PipelineOptions opts{.stages = config.stages, .fixed_projection = std::nullopt};
  for (std::size_t e = 0; e < config.episodes; ++e) {
    const Episode ep = sample_episode(splits, spec, derive_seed(config.seed, e));
    ad::Tape tape;
    ParamBinder p(tape, params, [&](const std::string& n) { return trainable.contains(n); });
    const EpisodeLoss el = episode_loss(p, cfg, ep, opts);
    tape.backward(el.loss);
    sgd_step(params, p.gradients(names), report.optimizer);
    report.loss_history.push_back(el.loss.value().item());

    const std::size_t done = e + 1;
    const bool checkpoint =
        validating && ((config.val_every > 0 && done % config.val_every == 0) ||
                       done == config.episodes);
    if (checkpoint) {
      const double acc = validate();
      report.val_history.emplace_back(done, acc);
      if (acc > report.best_val_accuracy) {
        report.best_val_accuracy = acc;
        report.best_episode = done;
        best = params;
      }
    }
  }
  if (validating)
    params = std::move(best);
  else
    report.best_episode = config.episodes;
  return report;
}

// ---- evaluation -----------------------------------------------------------

EpisodeRecord score_episode(const Tensor& logits, std::span<const std::size_t> targets,
                            std::size_t base_columns, std::size_t base_queries) {
  require(logits.rank() == 2 && logits.rows() == targets.size(), ErrorCode::kShapeMismatch,
          "one target per logit row required");
  require(base_queries <= targets.size() && base_columns < logits.cols(),
          ErrorCode::kInvalidArgument, "bad base query/column counts");
  const std::size_t cols = logits.cols();
  std::size_t joint = 0, joint_base = 0, joint_novel = 0, base_ind = 0, novel_ind = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const auto row = logits.row(r);
    const bool all = argmax(row) == targets[r];
    joint += all;
    if (r < base_queries) {
      joint_base += all;
      base_ind += argmax(row.subspan(0, base_columns)) == targets[r];
    } else {
      joint_novel += all;
      novel_ind += base_columns + argmax(row.subspan(base_columns, cols - base_columns)) == targets[r];
    }
  }
  const std::size_t nq = targets.size() - base_queries;
  auto pct = [](std::size_t a, std::size_t b) {
    return b == 0 ? 0.0 : 100.0 * static_cast<double>(a) / static_cast<double>(b);
  };
  EpisodeRecord rec;
  rec.joint = pct(joint, targets.size());
  rec.base_ind = pct(base_ind, base_queries);
  rec.novel_ind = pct(novel_ind, nq);
  rec.delta_a = pct(joint_base, base_queries) - rec.base_ind;
  rec.delta_b = pct(joint_novel, nq) - rec.novel_ind;
  return rec;
}

MetricsReport summarize(std::vector<EpisodeRecord> records) {
  MetricsReport m;
  m.episodes = records.size();
  if (records.empty()) return m;
  const double n = static_cast<double>(records.size());
  for (const auto& r : records) {
    m.joint_accuracy += r.joint;
    m.base_individual += r.base_ind;
    m.novel_individual += r.novel_ind;
    m.delta_a += r.delta_a;
    m.delta_b += r.delta_b;
  }
  m.joint_accuracy /= n;
  m.base_individual /= n;
  m.novel_individual /= n;
  m.delta_a /= n;
  m.delta_b /= n;
  m.delta = (m.delta_a + m.delta_b) / 2.0;
  if (records.size() > 1) {
    double ss = 0;
    for (const auto& r : records) ss += (r.joint - m.joint_accuracy) * (r.joint - m.joint_accuracy);
    m.joint_ci95 = 1.96 * std::sqrt(ss / (n - 1)) / std::sqrt(n);
  }
  m.records = std::move(records);
  return m;
}

std::size_t evaluation_threads(std::size_t requested) {
  std::size_t n = requested > 0 ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("XTAR_THREADS")) {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    if (end != env && cap > 0) n = std::min<std::size_t>(n, cap);
  }
  return n;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

MetricsReport evaluate(const ParamStore& params, const NetworkConfig& cfg,
                       const DatasetSplits& splits, const EvalConfig& config) {
  require(config.episodes > 0, ErrorCode::kInvalidArgument, "evaluation needs episodes");
  const EpisodeSpec spec{.phase = config.phase,
                         .n_way = config.n_way,
                         .k_shot = config.k_shot,
                         .q_per_class = config.q_per_class,
                         .fake_novel = false,
                         .balanced_base = false,
                         .feature_dim = cfg.feature_dim};
  const PipelineOptions opts{.stages = config.stages, .fixed_projection = std::nullopt};
  std::vector<EpisodeRecord> records(config.episodes);
  parallel_for(config.episodes, evaluation_threads(config.threads), [&](std::size_t i) {
    const std::uint64_t seed = derive_seed(config.seed, i);
    const Episode ep = sample_episode(splits, spec, seed);
    ad::Tape tape;
    ParamBinder p(tape, params);
    const TaskState task = process_support(p, cfg, ep, opts);
    const Tensor parts[] = {ep.query_base.inputs, ep.query_novel.inputs};
    std::vector<std::size_t> targets;
    for (int l : ep.query_base.labels) targets.push_back(task.column_of(l));
    for (int l : ep.query_novel.labels) targets.push_back(task.column_of(l));
    const QueryFeatures q = query_features(p, cfg, task, concat_rows(parts), opts);
    EpisodeRecord rec = score_episode(class_logits(task, q.combined).value(), targets,
                                      task.active_base.size(), ep.query_base.size());
    rec.episode_id = i;
    rec.seed = seed;
    records[i] = rec;
  });
  return summarize(std::move(records));
}

// ---- ablation -------------------------------------------------------------

std::vector<StageFlags> ablation_prefixes() {
  return {{false, false, false}, {true, false, false}, {true, true, false}, {true, true, true}};
}

bool is_stage_prefix(const StageFlags& s) {
  return (s.metacnn || !s.mergenet) && (s.mergenet || !s.tconnet);
}

std::string stage_label(const StageFlags& s) {
  if (s.tconnet) return "+tconnet";
  if (s.mergenet) return "+mergenet";
  if (s.metacnn) return "+metacnn";
  return "baseline";
}

std::vector<AblationRun> run_ablation(const ParamStore& pretrained, const NetworkConfig& cfg,
                                      const DatasetSplits& splits, const MetaConfig& meta,
                                      const EvalConfig& eval, std::span<const StageFlags> stages) {
  for (const auto& s : stages)
    require(is_stage_prefix(s), ErrorCode::kInvalidArgument,
            "ablation stages must be cumulative prefixes of metacnn, mergenet, tconnet");
  std::vector<AblationRun> runs;
  for (const auto& s : stages) {
    AblationRun run;
    run.stages = s;
    run.params = pretrained;
    MetaConfig m = meta;
    m.stages = s;
    run.training = meta_train(run.params, cfg, splits, m);
    EvalConfig e = eval;
    e.stages = s;
    run.metrics = evaluate(run.params, cfg, splits, e);
    runs.push_back(std::move(run));
  }
  return runs;
}

// ---- output ---------------------------------------------------------------

nlohmann::json to_json(const MetricsReport& r, bool include_records) {
  nlohmann::json j{{"episodes", r.episodes},
                   {"joint_accuracy", r.joint_accuracy},
                   {"joint_ci95", r.joint_ci95},
                   {"base_individual", r.base_individual},
                   {"novel_individual", r.novel_individual},
                   {"delta_a", r.delta_a},
                   {"delta_b", r.delta_b},
                   {"delta", r.delta}};
  if (include_records) {
    auto& arr = j["records"] = nlohmann::json::array();
    for (const auto& e : r.records)
      arr.push_back({{"episode_id", e.episode_id}, {"seed", e.seed}, {"joint", e.joint},
                     {"base_ind", e.base_ind}, {"novel_ind", e.novel_ind},
                     {"delta_a", e.delta_a}, {"delta_b", e.delta_b}});
  }
  return j;
}

nlohmann::json to_json(const PretrainReport& r) {
  const std::size_t n = r.loss_history.size();
  return {{"steps", r.steps},
          {"first_loss", n ? r.loss_history.front() : 0.0},
          {"final_loss", n ? r.loss_history.back() : 0.0},
          {"train_accuracy", r.train_accuracy},
          {"val_accuracy", r.val_accuracy}};
}

nlohmann::json to_json(const MetaTrainReport& r) {
  nlohmann::json val = nlohmann::json::array();
  for (const auto& [ep, acc] : r.val_history) val.push_back({{"episode", ep}, {"joint", acc}});
  const std::size_t n = r.loss_history.size();
  return {{"episodes", n},
          {"first_loss", n ? r.loss_history.front() : 0.0},
          {"final_loss", n ? r.loss_history.back() : 0.0},
          {"best_episode", r.best_episode},
          {"best_val_accuracy", r.best_val_accuracy},
          {"validation", val}};
}

void write_episode_csv(std::ostream& os, const std::vector<EpisodeRecord>& records) {
  os << "episode_id,seed,joint,base_ind,novel_ind,delta_a,delta_b\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%zu,%llu,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.episode_id,
                  static_cast<unsigned long long>(r.seed), r.joint, r.base_ind, r.novel_ind,
                  r.delta_a, r.delta_b);
    os << buf;
  }
}

}  // namespace xtar
