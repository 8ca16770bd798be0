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

// Acceptance run: one PASS/FAIL line per criterion, details indented above it.
// Exits non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <initializer_list>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "xtar/analysis.hpp"
#include "xtar/experiment.hpp"
#include "xtar/linalg.hpp"
#include "xtar/loss.hpp"
#include "xtar/pipeline.hpp"
#include "xtar/training.hpp"

using namespace xtar;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

namespace {

int failures = 0;

void detail(const char* fmt, auto... args) {
  std::printf("  ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

void verdict(int id, const char* title, bool pass) {
  std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", id, title);
  std::fflush(stdout);
  failures += !pass;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Replaces every all-zero parameter (the zero-initialised output layers) with
// small Gaussian values so the meta modules do something non-trivial.
void randomize_zero_layers(ParamStore& ps, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : ps) {
    const bool zero = std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 0.0; });
    if (zero) t = testing::random_tensor(t.shape(), rng, scale);
  }
}

Tensor query_inputs(const Episode& ep) {
  const Tensor parts[] = {ep.query_base.inputs, ep.query_novel.inputs};
  return concat_rows(parts);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// ---- straight-line oracle -------------------------------------------------

Vec lin(const ParamStore& ps, const std::string& prefix, const Vec& x) {
  const Tensor& w = ps.at(prefix + ".w");
  const Tensor& b = ps.at(prefix + ".b");
  Vec y(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.at(i, j);
    y[j] = s;
  }
  return y;
}

Vec relu(Vec x) {
  for (double& v : x) v = std::max(v, 0.0);
  return x;
}

Vec add(const Vec& a, const Vec& b) {
  Vec y(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Fully-connected backbone: f(x) and the tap a(x) in one pass.
void oracle_features(const ParamStore& ps, const NetworkConfig& cfg, std::span<const double> x,
                     Vec& f, Vec& g) {
  Vec h(x.begin(), x.end()), tap;
  for (std::size_t b = 1; b < cfg.num_blocks; ++b) {
    h = relu(lin(ps, "backbone.b" + std::to_string(b), h));
    if (b == cfg.tap_index) tap = h;
  }
  f = lin(ps, "backbone.b" + std::to_string(cfg.num_blocks), h);
  g = lin(ps, "metacnn.out", relu(lin(ps, "metacnn.hidden", tap)));
}

Vec residual_head(const ParamStore& ps, const std::string& name, const Vec& x) {
  Vec y = add(x, relu(lin(ps, name + ".l1", x)));
  y = add(y, relu(lin(ps, name + ".l2", y)));
  return lin(ps, name + ".l3", y);
}

// Posteriors over all N_b + N classes for every query, all stages on, Imprint
// initial weights, no masked base classes.
Mat oracle_posteriors(const ParamStore& ps, const NetworkConfig& cfg, const Episode& ep,
                      const Tensor& queries) {
  const std::size_t nb = cfg.num_base_classes, n = ep.n_way, D = cfg.feature_dim;
  const std::size_t S = ep.support.size();

  // Support features, task representation, mixture weights.
  Mat f(S), g(S);
  Vec c(2 * D, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    oracle_features(ps, cfg, ep.support.inputs.row(s), f[s], g[s]);
    for (std::size_t j = 0; j < D; ++j) {
      c[j] += f[s][j] / static_cast<double>(S);
      c[D + j] += g[s][j] / static_cast<double>(S);
    }
  }
  auto omega = [&](const std::string& name) {
    Vec x = c;
    for (std::size_t l = 1; l < cfg.mergenet_depth; ++l)
      x = relu(lin(ps, name + ".l" + std::to_string(l), x));
    Vec u = lin(ps, name + ".l" + std::to_string(cfg.mergenet_depth), x);
    for (double& v : u) v = 2.0 / (1.0 + std::exp(-v));
    return u;
  };
  const Vec wpre = omega("mergenet.pre"), wmeta = omega("mergenet.meta");
  auto mix = [&](const Vec& fv, const Vec& gv) {
    Vec z(D);
    for (std::size_t j = 0; j < D; ++j) z[j] = wpre[j] * fv[j] + wmeta[j] * gv[j];
    return z;
  };

  // Prototypes and their mean.
  Mat proto(n, Vec(D, 0.0));
  std::vector<double> count(n, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    const std::size_t k = static_cast<std::size_t>(ep.support.labels[s]) - nb - 1;
    const Vec z = mix(f[s], g[s]);
    for (std::size_t j = 0; j < D; ++j) proto[k][j] += z[j];
    count[k] += 1;
  }
  Vec cstar(D, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < D; ++j) {
      proto[k][j] /= count[k];
      cstar[j] += proto[k][j] / static_cast<double>(n);
    }

  // Conditioned base weights.
  const Vec gamma = residual_head(ps, "tconnet.gamma", cstar);
  const Vec beta = residual_head(ps, "tconnet.beta", cstar);
  const Tensor& W = ps.at("classifier.base_weights");
  Mat wstar(nb + n, Vec(D));
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t j = 0; j < D; ++j) wstar[i][j] = (1 + gamma[j]) * W.at(i, j) + beta[j];

  // Adapted novel weights.
  for (std::size_t k = 0; k < n; ++k) {
    Vec sigma(nb);
    for (std::size_t i = 0; i < nb; ++i) sigma[i] = dot(proto[k], wstar[i]);
    Vec y = relu(lin(ps, "tconnet.lambda.l1", sigma));
    y = add(y, relu(lin(ps, "tconnet.lambda.l2", y)));
    const Vec lambda = add(y, lin(ps, "tconnet.lambda.l3", y));
    const double mx = *std::max_element(lambda.begin(), lambda.end());
    double zsum = 0;
    for (double v : lambda) zsum += std::exp(v - mx);
    for (std::size_t j = 0; j < D; ++j) {
      double mixw = 0;
      for (std::size_t i = 0; i < nb; ++i) mixw += std::exp(lambda[i] - mx) / zsum * wstar[i][j];
      wstar[nb + k][j] = proto[k][j] - mixw;
    }
  }

  // Euclidean mode: orthonormal basis Q of the alignment errors, so the
  // projected squared distance is |v|^2 - sum_q (q.v)^2.
  Mat q;
  if (cfg.metric == MetricMode::kEuclideanProjected) {
    for (std::size_t k = 0; k < n; ++k) {
      const double nw = std::sqrt(dot(wstar[nb + k], wstar[nb + k]));
      const double nc = std::sqrt(dot(proto[k], proto[k]));
      Vec e(D);
      for (std::size_t j = 0; j < D; ++j) e[j] = wstar[nb + k][j] / nw - proto[k][j] / nc;
      for (int pass = 0; pass < 2; ++pass)
        for (const Vec& b : q) {
          const double a = dot(e, b);
          for (std::size_t j = 0; j < D; ++j) e[j] -= a * b[j];
        }
      const double ne = std::sqrt(dot(e, e));
      for (double& v : e) v /= ne;
      q.push_back(std::move(e));
    }
  }

  const double tau = ps.at("classifier.tau")[0];
  Mat out;
  for (std::size_t r = 0; r < queries.dim(0); ++r) {
    Vec fq, gq;
    oracle_features(ps, cfg, queries.row(r), fq, gq);
    const Vec z = mix(fq, gq);
    Vec logits(nb + n);
    for (std::size_t i = 0; i < nb + n; ++i) {
      if (cfg.metric == MetricMode::kCosine) {
        logits[i] = tau * dot(z, wstar[i]) / std::sqrt(dot(z, z) * dot(wstar[i], wstar[i]));
      } else {
        Vec v(D);
        for (std::size_t j = 0; j < D; ++j) v[j] = z[j] - wstar[i][j];
        double d = dot(v, v);
        for (const Vec& b : q) d -= dot(b, v) * dot(b, v);
        logits[i] = -d;
      }
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double zsum = 0;
    for (double v : logits) zsum += std::exp(v - mx);
    Vec p(nb + n);
    for (std::size_t i = 0; i < nb + n; ++i) p[i] = std::exp(logits[i] - mx) / zsum;
    out.push_back(std::move(p));
  }
  return out;
}

// ---- shared fixtures ------------------------------------------------------

NetworkConfig small_config(MetricMode metric) {
  NetworkConfig c;
  c.input_shape = {16};
  c.hidden = 32;
  c.num_blocks = 3;
  c.tap_index = 2;
  c.feature_dim = 16;
  c.num_base_classes = 8;
  c.n_way = 3;
  c.mergenet_depth = 3;
  c.metric = metric;
  return c;
}

const DatasetSplits& small_splits() {
  static const DatasetSplits s = [] {
    SyntheticConfig sc;
    sc.num_base_classes = 8;
    sc.novel_train_classes = 6;
    sc.novel_val_classes = 4;
    sc.novel_test_classes = 4;
    sc.per_class_count = 40;
    sc.input_shape = {16};
    sc.cluster_spread = 0.5;
    sc.seed = 11;
    return generate_synthetic(sc);
  }();
  return s;
}

ParamStore pretrained_small(MetricMode metric) {
  const NetworkConfig cfg = small_config(metric);
  ParamStore ps = init_params(cfg, 21);
  PretrainConfig pc = default_pretrain_config(metric);
  pc.epochs = 10;
  pc.seed = 22;
  pretrain(ps, cfg, small_splits(), pc);
  return ps;
}

Episode small_episode(std::uint64_t seed, Phase phase = Phase::kTest, bool fake = false) {
  EpisodeSpec spec{.phase = phase, .n_way = 3, .k_shot = 4, .q_per_class = 6, .fake_novel = fake};
  return sample_episode(small_splits(), spec, seed);
}

// ---- criteria -------------------------------------------------------------

void criterion1() {
  const auto t0 = Clock::now();
  SyntheticConfig sc;
  sc.seed = 31;
  const DatasetSplits splits = generate_synthetic(sc);
  NetworkConfig cfg;
  cfg.metric = MetricMode::kEuclideanProjected;
  cfg.num_base_classes = splits.num_base_classes();
  ParamStore ps = init_params(cfg, 32);
  randomize_zero_layers(ps, 33, 0.1);
  const Phase phases[] = {Phase::kMetaTrain, Phase::kVal, Phase::kTest};
  double worst_null = 0, worst_orth = 0;
  for (std::size_t e = 0; e < 1000; ++e) {
    EpisodeSpec spec{.phase = phases[e % 3], .n_way = 5, .k_shot = 5, .q_per_class = 1,
                     .fake_novel = e % 6 == 0, .feature_dim = 64};
    const Episode ep = sample_episode(splits, spec, derive_seed(34, e));
    ad::Tape tape;
    ParamBinder p(tape, ps);
    const TaskState t = process_support(p, cfg, ep);
    const Tensor& M = *t.projection;
    const Tensor eps = alignment_errors(t.novel_adapted.value(), t.prototypes.value());
    const Tensor em = matmul(eps, M);
    for (std::size_t r = 0; r < em.rows(); ++r)
      worst_null = std::max(worst_null, std::sqrt(squared_norm(em.row(r))));
    const Tensor mtm = matmul(transpose(M), M);
    for (std::size_t i = 0; i < mtm.rows(); ++i)
      for (std::size_t j = 0; j < mtm.cols(); ++j)
        worst_orth = std::max(worst_orth, std::abs(mtm.at(i, j) - (i == j ? 1.0 : 0.0)));
  }
  const double secs = seconds_since(t0);
  detail("1000 episodes, N=5, D=64: max |eps_n M| = %.3e, max |M^T M - I| = %.3e, %.1f s",
         worst_null, worst_orth, secs);
  verdict(1, "null-space projection invariant",
          worst_null <= 1e-6 && worst_orth <= 1e-8 && secs < 30);
}

void criterion2() {
  const auto t0 = Clock::now();
  NetworkConfig cfg;
  cfg.input_shape = {6};
  cfg.hidden = 8;
  cfg.num_blocks = 3;
  cfg.tap_index = 2;
  cfg.feature_dim = 8;
  cfg.num_base_classes = 4;
  cfg.n_way = 2;
  cfg.mergenet_depth = 3;
  cfg.metric = MetricMode::kCosine;
  SyntheticConfig sc;
  sc.num_base_classes = 4;
  sc.novel_train_classes = 3;
  sc.novel_val_classes = 2;
  sc.novel_test_classes = 2;
  sc.per_class_count = 12;
  sc.input_shape = {6};
  sc.cluster_spread = 0.3;
  sc.seed = 41;
  const DatasetSplits splits = generate_synthetic(sc);
  ParamStore ps = init_params(cfg, 42);
  randomize_zero_layers(ps, 43);
  const Episode ep = sample_episode(
      splits, {.phase = Phase::kMetaTrain, .n_way = 2, .k_shot = 1, .q_per_class = 2}, 44);
  const auto names = meta_parameter_names(cfg, {});
  const auto r = testing::check_gradients(
      ps, names, [&](ParamBinder& p) { return episode_loss(p, cfg, ep).loss; });
  const double secs = seconds_since(t0);
  detail("%zu meta-parameter entries, worst %s: analytic %.6e vs numeric %.6e", r.checked,
         r.worst.c_str(), r.worst_analytic, r.worst_numeric);
  detail("max relative error %.3e (floor 1e-5), %.1f s", r.max_rel_error, secs);
  verdict(2, "gradients match central differences", r.max_rel_error <= 1e-4 && secs < 60);
}

void criterion3() {
  const NetworkConfig cfg = small_config(MetricMode::kCosine);
  const ParamStore ps = pretrained_small(MetricMode::kCosine);
  const Episode ep = small_episode(derive_seed(51, 0));
  ad::Tape tape;
  ParamBinder p(tape, ps);
  const TaskState t = process_support(p, cfg, ep);
  const auto post = classify(p, cfg, t, ep.query_base.inputs);
  const ad::Var head = base_head_logits(p, cfg, backbone_forward(p, cfg, ep.query_base.inputs).feature);
  double worst = 0;
  for (std::size_t r = 0; r < post.size(); ++r) {
    const auto ref = softmax(head.value().row(r));
    double mass = 0;
    for (std::size_t i = 0; i < cfg.num_base_classes; ++i) mass += post[r][i];
    for (std::size_t i = 0; i < cfg.num_base_classes; ++i)
      worst = std::max(worst, std::abs(post[r][i] / mass - ref[i]));
  }
  detail("%zu base queries, pretrained backbone, fresh meta modules: max |p - p_backbone| = %.3e",
         post.size(), worst);
  verdict(3, "initialisation identity on base posteriors", worst <= 1e-9);
}

void criterion4() {
  double worst = 0;
  std::size_t rows = 0;
  for (MetricMode metric : {MetricMode::kEuclideanProjected, MetricMode::kCosine}) {
    const NetworkConfig cfg = small_config(metric);
    ParamStore ps = init_params(cfg, 61);
    randomize_zero_layers(ps, 62, 0.2);
    const Episode ep = small_episode(63);
    const Tensor queries = query_inputs(ep);
    ad::Tape tape;
    ParamBinder p(tape, ps);
    const TaskState t = process_support(p, cfg, ep);
    const auto got = classify(p, cfg, t, queries);
    const Mat want = oracle_posteriors(ps, cfg, ep, queries);
    double w = 0;
    for (std::size_t r = 0; r < got.size(); ++r)
      for (std::size_t i = 0; i < got[r].size(); ++i) w = std::max(w, std::abs(got[r][i] - want[r][i]));
    detail("%s: %zu queries, max |p - p_oracle| = %.3e", to_string(metric), got.size(), w);
    worst = std::max(worst, w);
    rows += got.size();
  }
  verdict(4, "straight-line oracle equivalence", worst <= 1e-10 && rows > 0);
}

// Benchmark: 20 base classes, 5-way 5-shot, D = 64, cosine head.
ExperimentConfig benchmark_config(std::uint64_t seed) {
  nlohmann::json j{{"synth_base_classes", 20},      {"synth_novel_train_classes", 100},
                   {"synth_novel_val_classes", 20}, {"synth_novel_test_classes", 20},
                   {"synth_per_class", 150},        {"synth_spread", 1.0},
                   {"meta_episodes", 2000},         {"eval_episodes", 500},
                   {"analysis_episodes", 300},      {"analysis_q_per_class", 25},
                   {"data_seed", seed},             {"init_seed", seed},
                   {"episode_seed", seed}};
  return config_from_json(j);
}

struct SeedRun {
  std::vector<AblationRun> ablation;
  AnalysisReport imprint, tar;
  double seconds = 0;
};

SeedRun run_seed(std::uint64_t seed) {
  const auto t0 = Clock::now();
  const ExperimentConfig c = benchmark_config(seed);
  const DatasetSplits splits = load_data(c);
  const NetworkConfig net = network_config(c, splits);
  ParamStore pre = init_params(net, c.init_seed);
  const PretrainReport pr = pretrain(pre, net, splits, pretrain_config(c));
  const auto prefixes = ablation_prefixes();
  SeedRun out;
  out.ablation = run_ablation(pre, net, splits, meta_config(c), eval_config(c), prefixes);
  const AnalysisConfig ac = analysis_config(c);
  out.imprint = analyze(pre, net, splits, ac, {false, false, false}, SseMode::kBaseOnly);
  out.tar = analyze(out.ablation.back().params, net, splits, ac, c.stages, SseMode::kTar);
  out.seconds = seconds_since(t0);
  detail("seed %llu: pretrain val %.2f%%, %.1f s total", static_cast<unsigned long long>(seed),
         pr.val_accuracy, out.seconds);
  for (const auto& r : out.ablation)
    detail("  %-9s joint %.2f +- %.2f  base %.2f  novel %.2f  da %.2f  db %.2f", stage_label(r.stages).c_str(),
           r.metrics.joint_accuracy, r.metrics.joint_ci95, r.metrics.base_individual,
           r.metrics.novel_individual, r.metrics.delta_a, r.metrics.delta_b);
  return out;
}

template <class F>
double mean_over(const std::vector<SeedRun>& runs, F get) {
  double s = 0;
  for (const auto& r : runs) s += get(r);
  return s / static_cast<double>(runs.size());
}

void criteria5to7(std::vector<SeedRun>& runs) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) runs.push_back(run_seed(seed));

  // 5: ablation ordering.
  double m[4];
  for (std::size_t i = 0; i < 4; ++i)
    m[i] = mean_over(runs, [i](const SeedRun& r) { return r.ablation[i].metrics.joint_accuracy; });
  double slowest = 0;
  for (const auto& r : runs) slowest = std::max(slowest, r.seconds);
  detail("mean joint: baseline %.2f, +metacnn %.2f, +mergenet %.2f, +tconnet %.2f; gain %.2f points",
         m[0], m[1], m[2], m[3], m[3] - m[0]);
  detail("slowest seed %.1f s (target 600 s)", slowest);
  verdict(5, "ablation ordering and gain over Imprint",
          m[0] < m[1] && m[1] <= m[2] && m[2] <= m[3] && m[3] - m[0] >= 5.0 && slowest < 600);

  // 6: clustering.
  const double ib = mean_over(runs, [](const SeedRun& r) { return r.imprint.clusters.base_sse; });
  const double in = mean_over(runs, [](const SeedRun& r) { return r.imprint.clusters.novel_sse; });
  const double tb = mean_over(runs, [](const SeedRun& r) { return r.tar.clusters.base_sse; });
  const double tn = mean_over(runs, [](const SeedRun& r) { return r.tar.clusters.novel_sse; });
  const double ibn = mean_over(runs, [](const SeedRun& r) { return r.imprint.clusters.base_nsse; });
  const double inn = mean_over(runs, [](const SeedRun& r) { return r.imprint.clusters.novel_nsse; });
  const double tbn = mean_over(runs, [](const SeedRun& r) { return r.tar.clusters.base_nsse; });
  const double tnn = mean_over(runs, [](const SeedRun& r) { return r.tar.clusters.novel_nsse; });
  detail("SSE   imprint base %.4f novel %.4f | TAR base %.4f novel %.4f", ib, in, tb, tn);
  detail("nSSE  imprint base %.4f novel %.4f | TAR base %.4f novel %.4f", ibn, inn, tbn, tnn);
  verdict(6, "TAR lowers SSE for base and novel groups", tb < ib && tn < in);

  // 7: entropies, plus the near-uniform limit on an untrained model.
  const double eb0 = mean_over(runs, [](const SeedRun& r) { return r.imprint.entropy.base_cross_entropy; });
  const double en0 = mean_over(runs, [](const SeedRun& r) { return r.imprint.entropy.novel_cross_entropy; });
  const double hb0 = mean_over(runs, [](const SeedRun& r) { return r.imprint.entropy.base_shannon; });
  const double hn0 = mean_over(runs, [](const SeedRun& r) { return r.imprint.entropy.novel_shannon; });
  const double eb1 = mean_over(runs, [](const SeedRun& r) { return r.tar.entropy.base_cross_entropy; });
  const double en1 = mean_over(runs, [](const SeedRun& r) { return r.tar.entropy.novel_cross_entropy; });
  const double hb1 = mean_over(runs, [](const SeedRun& r) { return r.tar.entropy.base_shannon; });
  const double hn1 = mean_over(runs, [](const SeedRun& r) { return r.tar.entropy.novel_shannon; });
  detail("E  imprint base %.4f novel %.4f | TAR base %.4f novel %.4f", eb0, en0, eb1, en1);
  detail("H  imprint base %.4f novel %.4f | TAR base %.4f novel %.4f", hb0, hn0, hb1, hn1);
  const bool lower = eb1 < eb0 && en1 < en0 && hb1 < hb0 && hn1 < hn0;

  const ExperimentConfig c = benchmark_config(0);
  const DatasetSplits splits = load_data(c);
  const NetworkConfig net = network_config(c, splits);
  const ParamStore untrained = init_params(net, c.init_seed);
  const AnalysisReport u =
      analyze(untrained, net, splits, analysis_config(c), {false, false, false}, SseMode::kBaseOnly);
  const double uniform = std::log(static_cast<double>(net.num_base_classes + c.n_way));
  const double rel = std::abs(u.entropy.novel_shannon - uniform) / uniform;
  detail("untrained Imprint H: base %.4f novel %.4f vs ln(%zu) = %.4f (novel off by %.1f%%)",
         u.entropy.base_shannon, u.entropy.novel_shannon, net.num_base_classes + c.n_way, uniform,
         100 * rel);
  verdict(7, "TAR lowers E and H for both groups; untrained H near uniform", lower && rel <= 0.05);
}

void criterion8(const std::vector<SeedRun>& runs) {
  std::size_t reports = 0, episodes = 0, bad_delta = 0, positive = 0;
  auto check_report = [&](const MetricsReport& m) {
    ++reports;
    bad_delta += m.delta != 0.5 * (m.delta_a + m.delta_b);
    for (const auto& r : m.records) {
      ++episodes;
      positive += r.delta_a > 0 || r.delta_b > 0;
    }
  };
  for (const auto& s : runs)
    for (const auto& a : s.ablation) check_report(a.metrics);

  std::size_t queries = 0;
  double worst_sum = 0;
  for (MetricMode metric : {MetricMode::kCosine, MetricMode::kEuclideanProjected}) {
    const NetworkConfig cfg = small_config(metric);
    ParamStore ps = pretrained_small(metric);
    randomize_zero_layers(ps, 81, 0.2);
    EvalConfig ec{.phase = Phase::kTest, .episodes = 20, .n_way = 3, .k_shot = 4, .q_per_class = 6,
                  .seed = 82};
    check_report(evaluate(ps, cfg, small_splits(), ec));
    std::mt19937_64 rng(83);
    for (std::size_t e = 0; e < 10; ++e) {
      const Episode ep = small_episode(derive_seed(84, e), e % 2 ? Phase::kTest : Phase::kMetaTrain, e % 2 == 0);
      ad::Tape tape;
      ParamBinder p(tape, ps);
      const TaskState t = process_support(p, cfg, ep);
      const auto post = classify(p, cfg, t, testing::random_tensor({500, 16}, rng, 2.0));
      for (const auto& row : post) {
        worst_sum = std::max(worst_sum, std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0));
        ++queries;
      }
    }
  }
  detail("%zu reports, %zu with delta != (da + db) / 2", reports, bad_delta);
  detail("%zu episodes, %zu with da > 0 or db > 0", episodes, positive);
  detail("%zu random queries, max |sum p - 1| = %.3e", queries, worst_sum);
  verdict(8, "metric definitions",
          bad_delta == 0 && positive == 0 && worst_sum <= 1e-9 && queries >= 10000);
}

void criterion9() {
  const fs::path dir = fs::temp_directory_path() / "xtar_acceptance_determinism";
  nlohmann::json j{{"synth_base_classes", 6},   {"synth_novel_train_classes", 5},
                   {"synth_novel_val_classes", 3}, {"synth_novel_test_classes", 3},
                   {"synth_per_class", 30},     {"synth_input_shape", {12}},
                   {"synth_spread", 0.4},       {"hidden", 16},
                   {"num_blocks", 3},           {"tap_index", 2},
                   {"feature_dim", 10},         {"mergenet_depth", 3},
                   {"n_way", 3},                {"k_shot", 2},
                   {"q_per_class", 3},          {"pretrain_epochs", 4},
                   {"meta_episodes", 30},       {"val_every", 10},
                   {"val_episodes", 5},         {"eval_episodes", 40},
                   {"data_seed", 91},           {"init_seed", 92},
                   {"episode_seed", 93},        {"output_dir", dir.string()}};
  const ExperimentConfig c = config_from_json(j);

  struct Snapshot {
    std::string pre, meta, eval, pre_ckpt, meta_ckpt;
  };
  auto full_run = [&] {
    fs::remove_all(dir);
    Snapshot s;
    run_pretrain(c);
    s.pre = slurp(dir / "summary.json");
    s.pre_ckpt = slurp(dir / "pretrained.xtck");
    run_meta_train(c, dir / "pretrained.xtck");
    s.meta = slurp(dir / "summary.json");
    s.meta_ckpt = slurp(dir / "meta.xtck");
    run_eval(c, dir / "meta.xtck");
    s.eval = slurp(dir / "summary.json");
    return s;
  };
  const Snapshot a = full_run();
  const Snapshot b = full_run();
  const bool same = a.pre == b.pre && a.meta == b.meta && a.eval == b.eval &&
                    a.pre_ckpt == b.pre_ckpt && a.meta_ckpt == b.meta_ckpt;
  detail("two full runs: summaries %s, checkpoints %s", (a.pre == b.pre && a.meta == b.meta && a.eval == b.eval) ? "identical" : "differ",
         (a.pre_ckpt == b.pre_ckpt && a.meta_ckpt == b.meta_ckpt) ? "identical" : "differ");

  const Checkpoint ck = load_checkpoint(dir / "meta.xtck");
  const DatasetSplits splits = load_data(c);
  const MetricsReport direct = evaluate(ck.params, network_config(c, splits), splits, eval_config(c));
  const auto saved = nlohmann::json::parse(b.eval)["metrics"];
  const bool eval_equal = to_json(direct).dump() == saved.dump();
  save_checkpoint(dir / "resaved.xtck", ck);
  const bool resave = slurp(dir / "resaved.xtck") == b.meta_ckpt;
  detail("evaluation from the loaded checkpoint %s the driver's metrics; resave %s",
         eval_equal ? "equals" : "differs from", resave ? "byte-identical" : "differs");
  fs::remove_all(dir);
  verdict(9, "determinism and checkpoint persistence", same && eval_equal && resave);
}

}  // namespace

// Optional arguments pick criteria by number; 5, 6 and 7 share one run.
int main(int argc, char** argv) {
  std::vector<int> pick;
  for (int i = 1; i < argc; ++i) pick.push_back(std::atoi(argv[i]));
  auto wanted = [&](std::initializer_list<int> ids) {
    if (pick.empty()) return true;
    for (int id : ids)
      if (std::find(pick.begin(), pick.end(), id) != pick.end()) return true;
    return false;
  };
  try {
    if (wanted({1})) criterion1();
    if (wanted({2})) criterion2();
    if (wanted({3})) criterion3();
    if (wanted({4})) criterion4();
    std::vector<SeedRun> runs;
    if (wanted({5, 6, 7})) criteria5to7(runs);
    if (wanted({8})) criterion8(runs);
    if (wanted({9})) criterion9();
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
