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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "xtar/error.hpp"
#include "xtar/loss.hpp"
#include "xtar/pipeline.hpp"

using namespace xtar;
using xtar::testing::check_gradients;
using xtar::testing::random_tensor;

namespace {

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.input_shape = {6};
  c.hidden = 8;
  c.num_blocks = 3;
  c.tap_index = 2;
  c.feature_dim = 8;
  c.num_base_classes = 4;
  c.n_way = 2;
  c.mergenet_depth = 3;
  return c;
}

const DatasetSplits& tiny_splits() {
  static const DatasetSplits s = [] {
    SyntheticConfig sc;
    sc.num_base_classes = 4;
    sc.novel_train_classes = 3;
    sc.novel_val_classes = 2;
    sc.novel_test_classes = 2;
    sc.per_class_count = 12;
    sc.input_shape = {6};
    sc.cluster_spread = 0.3;
    return generate_synthetic(sc);
  }();
  return s;
}

Episode tiny_episode(std::uint64_t seed, std::size_t k = 2, bool fake = false) {
  EpisodeSpec spec{.phase = Phase::kMetaTrain, .n_way = 2, .k_shot = k, .q_per_class = 2,
                   .fake_novel = fake};
  return sample_episode(tiny_splits(), spec, seed);
}

void fill_zeros(ParamStore& ps, std::mt19937_64& rng) {
  for (auto& [name, t] : ps) {
    bool zero = true;
    for (double v : t.data()) zero = zero && v == 0.0;
    if (zero) t = random_tensor(t.shape(), rng, 0.3);
  }
}

ad::Var constant(ad::Tape& t, Tensor v) { return t.constant(std::move(v)); }

}  // namespace

TEST_SUITE("pipeline blocks") {
  TEST_CASE("combined feature") {
    ad::Tape t;
    const auto z = combine_features(constant(t, Tensor::matrix(1, 2, {1, 2})),
                                    constant(t, Tensor::matrix(1, 2, {3, 4})),
                                    constant(t, Tensor::matrix(1, 2, {0.5, 0.5})),
                                    constant(t, Tensor::matrix(1, 2, {1, 0})));
    CHECK(z.value() == Tensor::matrix(1, 2, {3.5, 1.0}));
    const auto base_only = combine_features(
        constant(t, Tensor::matrix(1, 2, {1, 2})), constant(t, Tensor::matrix(1, 2, {3, 4})),
        constant(t, Tensor::matrix(1, 2, {1, 1})), constant(t, Tensor::matrix(1, 2, {0, 0})));
    CHECK(base_only.value() == Tensor::matrix(1, 2, {1, 2}));
  }

  TEST_CASE("class means") {
    ad::Tape t;
    const auto z = constant(t, Tensor::matrix(3, 2, {0, 0, 5, 5, 2, 4}));
    const int labels[] = {7, 8, 7};
    const int classes[] = {7, 8};
    const auto m = class_means(z, labels, classes);
    CHECK(m.value() == Tensor::matrix(2, 2, {1, 2, 5, 5}));
    const int missing[] = {7, 9};
    CHECK_THROWS_AS(class_means(z, labels, missing), Error);
  }

  TEST_CASE("base conditioning") {
    ad::Tape t;
    const auto w = constant(t, Tensor::matrix(1, 2, {1, 1}));
    const auto out = condition_base(w, constant(t, Tensor::matrix(1, 2, {0.5, -0.5})),
                                    constant(t, Tensor::matrix(1, 2, {0.1, 0.2})));
    CHECK(out.value().at(0, 0) == doctest::Approx(1.6).epsilon(1e-15));
    CHECK(out.value().at(0, 1) == doctest::Approx(0.7).epsilon(1e-15));
    const auto annihilated =
        condition_base(constant(t, Tensor::matrix(2, 2, {3, -1, 2, 9})),
                       constant(t, Tensor::matrix(1, 2, {-1, -1})),
                       constant(t, Tensor::matrix(1, 2, {0.25, 0.5})));
    CHECK(annihilated.value() == Tensor::matrix(2, 2, {0.25, 0.5, 0.25, 0.5}));
  }

  TEST_CASE("novel adaptation") {
    ad::Tape t;
    const auto base = constant(t, Tensor::matrix(2, 2, {1, 0, 0, 1}));
    const auto init = constant(t, Tensor::matrix(1, 2, {2, 2}));
    const auto hand = adapt_novel(init, constant(t, Tensor::matrix(1, 2, {std::log(3.0), 0})), base);
    CHECK(hand.value().at(0, 0) == doctest::Approx(2 - 0.75).epsilon(1e-14));
    CHECK(hand.value().at(0, 1) == doctest::Approx(2 - 0.25).epsilon(1e-14));
    const auto uniform = adapt_novel(init, constant(t, Tensor::matrix(1, 2, {0.3, 0.3})), base);
    CHECK(uniform.value() == Tensor::matrix(1, 2, {1.5, 1.5}));
    const auto sharp = adapt_novel(init, constant(t, Tensor::matrix(1, 2, {0, 900})), base);
    CHECK(sharp.value().at(0, 0) == doctest::Approx(2.0));
    CHECK(sharp.value().at(0, 1) == doctest::Approx(1.0));
  }

  TEST_CASE("alignment projection") {
    std::mt19937_64 rng(12);
    const Tensor w = random_tensor({3, 16}, rng), c = random_tensor({3, 16}, rng);
    const Tensor m = alignment_projection(w, c);
    CHECK(m.shape() == Shape{16, 13});
    const Tensor em = matmul(alignment_errors(w, c), m);
    for (std::size_t n = 0; n < 3; ++n) CHECK(std::sqrt(squared_norm(em.row(n))) <= 1e-8);

    Tensor scaled = c;
    for (auto& v : scaled.data()) v *= 2.5;
    const Tensor e = alignment_errors(scaled, c);
    CHECK(std::sqrt(squared_norm(e.data())) <= 1e-15);
    CHECK(alignment_projection(scaled, c).shape() == Shape{16, 13});

    Tensor zero_row = w;
    for (std::size_t j = 0; j < 16; ++j) zero_row.at(1, j) = 0.0;
    CHECK_THROWS_AS(alignment_errors(zero_row, c), Error);
  }
}

TEST_SUITE("pipeline") {
  TEST_CASE("initialisation identity") {
    const NetworkConfig cfg = tiny_config();
    const ParamStore ps = init_params(cfg, 1);
    const Episode ep = tiny_episode(1);
    ad::Tape tape;
    ParamBinder p(tape, ps);
    const TaskState plain = process_support(p, cfg, ep, {.stages = {true, true, false}});
    const BackboneOutput bo = backbone_forward(p, cfg, ep.support.inputs);
    const Tensor& f = bo.feature.value();
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t j = 0; j < 8; ++j) {
        double m = 0;
        for (std::size_t s = 0; s < ep.support.size(); ++s)
          if (ep.support.labels[s] == static_cast<int>(5 + k)) m += f.at(s, j) / 2.0;
        CHECK(plain.w_star.value().at(4 + k, j) == doctest::Approx(m).epsilon(1e-12));
      }
    const TaskState full = process_support(p, cfg, ep);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        CHECK(full.w_star.value().at(i, j) == ps.at("classifier.base_weights").at(i, j));
  }

  TEST_CASE("c* is the mean prototype and support order does not matter") {
    const NetworkConfig cfg = tiny_config();
    std::mt19937_64 rng(2);
    ParamStore ps = init_params(cfg, 2);
    fill_zeros(ps, rng);
    Episode ep = tiny_episode(2, 3);
    ad::Tape tape;
    ParamBinder p(tape, ps);
    const TaskState a = process_support(p, cfg, ep);
    for (std::size_t j = 0; j < 8; ++j) {
      const double m = (a.prototypes.value().at(0, j) + a.prototypes.value().at(1, j)) / 2;
      CHECK(std::abs(a.c_star.value()[j] - m) <= 1e-10);
    }
    std::vector<std::size_t> order(ep.support.size());
    std::iota(order.begin(), order.end(), 0);
    std::reverse(order.begin(), order.end());
    Episode shuffled = ep;
    shuffled.support.inputs = ep.support.inputs.gather(order);
    for (std::size_t i = 0; i < order.size(); ++i)
      shuffled.support.labels[i] = ep.support.labels[order[i]];
    const TaskState b = process_support(p, cfg, shuffled);
    CHECK(max_abs_diff(a.w_star.value(), b.w_star.value()) <= 1e-9);
    CHECK(max_abs_diff(a.omega_pre.value(), b.omega_pre.value()) <= 1e-9);
    CHECK(max_abs_diff(a.prototypes.value(), b.prototypes.value()) <= 1e-9);
  }

  TEST_CASE("hand-built euclidean posterior") {
    ad::Tape t;
    TaskState task;
    task.metric = MetricMode::kEuclideanProjected;
    task.num_base_classes = 2;
    task.n_way = 1;
    task.column_labels = {1, 2, 3};
    task.w_star = constant(t, Tensor::matrix(3, 2, {0, 0, 1, 0, 2, 0}));
    task.projection = Tensor::matrix(2, 1, {1, 0});
    const auto logits = class_logits(task, constant(t, Tensor::matrix(1, 2, {0, 5})));
    const auto post = posteriors(task, logits)[0];
    const double z = 1 + std::exp(-1.0) + std::exp(-4.0);
    CHECK(post[0] == doctest::Approx(1 / z).epsilon(1e-14));
    CHECK(post[1] == doctest::Approx(std::exp(-1.0) / z).epsilon(1e-14));
    CHECK(post[2] == doctest::Approx(std::exp(-4.0) / z).epsilon(1e-14));
    CHECK(post[0] == doctest::Approx(0.7214).epsilon(1e-4));
    CHECK(post[1] == doctest::Approx(0.2654).epsilon(1e-4));
    CHECK(post[2] == doctest::Approx(0.0132).epsilon(1e-2));

    // Distances (0, 1, 3) give the rounded triple (0.705, 0.259, 0.035).
    task.w_star = constant(t, Tensor::matrix(3, 2, {0, 0, 1, 0, std::sqrt(3.0), 0}));
    const auto post3 = posteriors(task, class_logits(task, constant(t, Tensor::matrix(1, 2, {0, 5}))))[0];
    CHECK(post3[0] == doctest::Approx(0.705).epsilon(1e-3));
    CHECK(post3[1] == doctest::Approx(0.259).epsilon(2e-3));
    CHECK(post3[2] == doctest::Approx(0.035).epsilon(2e-2));

    task.w_star = constant(t, Tensor::matrix(3, 2, {1, 0, -1, 0, 1, 7}));
    const auto uniform = posteriors(task, class_logits(task, constant(t, Tensor::matrix(1, 2, {0, 0}))))[0];
    for (double v : uniform) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));
  }

  TEST_CASE("posteriors normalise and masked classes get zero") {
    const NetworkConfig cfg = tiny_config();
    std::mt19937_64 rng(3);
    ParamStore ps = init_params(cfg, 3);
    fill_zeros(ps, rng);
    for (bool fake : {false, true})
      for (MetricMode metric : {MetricMode::kCosine, MetricMode::kEuclideanProjected}) {
        NetworkConfig c = cfg;
        c.metric = metric;
        const Episode ep = tiny_episode(3, 2, fake);
        ad::Tape tape;
        ParamBinder p(tape, ps);
        const TaskState task = process_support(p, c, ep);
        CHECK(task.w_star.rows() == 6 - ep.masked_base.size());
        const auto post = classify(p, c, task, ep.query_base.inputs);
        for (const auto& row : post) {
          CHECK(row.size() == 6);
          CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) <= 1e-9);
          for (int m : ep.masked_base) CHECK(row[m - 1] == 0.0);
        }
        if (metric == MetricMode::kEuclideanProjected) {
          const Tensor eps = alignment_errors(task.novel_adapted.value(), task.prototypes.value());
          const Tensor em = matmul(eps, *task.projection);
          CHECK(max_abs_diff(em, Tensor(em.shape(), 0.0)) <= 1e-6);
        }
      }
  }

  TEST_CASE("cosine scale never changes the prediction") {
    const NetworkConfig cfg = tiny_config();
    std::mt19937_64 rng(4);
    ParamStore ps = init_params(cfg, 4);
    fill_zeros(ps, rng);
    const Episode ep = tiny_episode(4);
    std::vector<std::size_t> before;
    for (double tau : {10.0, 0.5, 77.0}) {
      ps["classifier.tau"] = Tensor::scalar(tau);
      ad::Tape tape;
      ParamBinder p(tape, ps);
      const TaskState task = process_support(p, cfg, ep);
      const auto post = classify(p, cfg, task, ep.query_novel.inputs);
      std::vector<std::size_t> pred;
      for (const auto& row : post) pred.push_back(argmax(row));
      if (before.empty()) before = pred;
      CHECK(pred == before);
    }
  }

  TEST_CASE("episode loss gradients match central differences") {
    std::mt19937_64 rng(5);
    for (NovelVariant variant : {NovelVariant::kImprint, NovelVariant::kTapNet, NovelVariant::kLwoF})
      for (MetricMode metric : {MetricMode::kCosine, MetricMode::kEuclideanProjected})
        for (bool fake : {false, true}) {
          NetworkConfig cfg = tiny_config();
          cfg.variant = variant;
          cfg.metric = metric;
          ParamStore ps = init_params(cfg, 6);
          fill_zeros(ps, rng);
          const Episode ep = tiny_episode(6, 1, fake);
          PipelineOptions opts;
          if (metric == MetricMode::kEuclideanProjected) {
            ad::Tape tape;
            ParamBinder p(tape, ps);
            opts.fixed_projection = *process_support(p, cfg, ep).projection;
          }
          const auto names = meta_parameter_names(cfg, {});
          const auto r = check_gradients(ps, names, [&](ParamBinder& p) {
            return episode_loss(p, cfg, ep, opts).loss;
          });
          INFO(std::string(to_string(variant)), " ", std::string(to_string(metric)), " fake=", fake, " ",
               r.worst, " ", r.worst_analytic, " vs ", r.worst_numeric);
          CHECK(r.max_rel_error <= 1e-4);
        }
  }

  TEST_CASE("disabled stages are constants") {
    const NetworkConfig cfg = tiny_config();
    std::mt19937_64 rng(7);
    ParamStore ps = init_params(cfg, 7);
    fill_zeros(ps, rng);
    const Episode ep = tiny_episode(7);
    ad::Tape tape;
    ParamBinder p(tape, ps, [](const std::string&) { return true; });
    const auto loss = episode_loss(p, cfg, ep, {.stages = {false, false, false}});
    tape.backward(loss.loss);
    for (const auto& [name, g] : p.gradients(meta_parameter_names(cfg, {}))) {
      INFO(name);
      CHECK(max_abs_diff(g, Tensor(g.shape(), 0.0)) == 0.0);
    }
    CHECK(loss.task.w_star.value().gather(std::vector<std::size_t>{0, 1, 2, 3}) ==
          ps.at("classifier.base_weights"));
  }
}
