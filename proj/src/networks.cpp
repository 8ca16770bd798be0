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

#include "xtar/networks.hpp"

#include <cmath>
#include <random>

#include "xtar/error.hpp"

namespace xtar {

const char* to_string(BackboneKind k) {
  return k == BackboneKind::kFullyConnected ? "fc" : "conv";
}

const char* to_string(NovelVariant v) {
  switch (v) {
    case NovelVariant::kImprint: return "imprint";
    case NovelVariant::kLwoF: return "lwof";
    case NovelVariant::kTapNet: return "tapnet";
  }
  return "?";
}

const char* to_string(MetricMode m) {
  return m == MetricMode::kCosine ? "cosine" : "euclidean";
}

BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "fc") return BackboneKind::kFullyConnected;
  if (s == "conv") return BackboneKind::kConvolutional;
  fail(ErrorCode::kInvalidArgument, "unknown backbone kind '" + s + "'");
}

NovelVariant parse_variant(const std::string& s) {
  if (s == "imprint") return NovelVariant::kImprint;
  if (s == "lwof") return NovelVariant::kLwoF;
  if (s == "tapnet") return NovelVariant::kTapNet;
  fail(ErrorCode::kInvalidArgument, "unknown novel classifier variant '" + s + "'");
}

MetricMode parse_metric(const std::string& s) {
  if (s == "cosine") return MetricMode::kCosine;
  if (s == "euclidean") return MetricMode::kEuclideanProjected;
  fail(ErrorCode::kInvalidArgument, "unknown metric mode '" + s + "'");
}

void NetworkConfig::validate() const {
  require(num_blocks >= 2, ErrorCode::kInvalidArgument, "backbone needs at least two blocks");
  require(tap_index > 0 && tap_index < num_blocks, ErrorCode::kInvalidArgument,
          "tap_index must be strictly inside the backbone (0 < tap < num_blocks)");
  require(feature_dim > 0 && hidden > 0 && num_base_classes > 0 && n_way > 0,
          ErrorCode::kInvalidArgument, "network sizes must be positive");
  require(n_way < feature_dim, ErrorCode::kInvalidArgument, "N must be smaller than D");
  require(mergenet_depth >= 1, ErrorCode::kInvalidArgument, "MergeNet depth must be >= 1");
  require(cosine_scale_init > 0.0, ErrorCode::kInvalidArgument, "cosine scale must be positive");
  if (backbone == BackboneKind::kFullyConnected)
    require(!input_shape.empty(), ErrorCode::kInvalidArgument, "input shape is empty");
  else
    require(input_shape.size() == 3, ErrorCode::kInvalidArgument,
            "conv backbone expects [C, H, W] inputs");
}

Shape NetworkConfig::tap_shape() const {
  if (backbone == BackboneKind::kFullyConnected) return {hidden};
  std::size_t h = input_shape[1], w = input_shape[2];
  for (std::size_t b = 0; b < tap_index; ++b)
    if (h >= 2 && w >= 2) h /= 2, w /= 2;
  return {hidden, h, w};
}

namespace {

std::string block(const std::string& prefix, std::size_t i) {
  return prefix + ".b" + std::to_string(i);
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  void linear(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
              bool zero = false) {
    ps[prefix + ".w"] = zero ? Tensor({in, out}, 0.0) : gaussian({in, out}, std::sqrt(2.0 / in));
    ps[prefix + ".b"] = Tensor({1, out}, 0.0);
  }

  void conv(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out) {
    ps[prefix + ".w"] = gaussian({out, in, 3, 3}, std::sqrt(2.0 / (in * 9)));
    ps[prefix + ".b"] = Tensor({out}, 0.0);
  }

  Tensor gaussian(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, stddev);
    for (auto& v : t.data()) v = n(rng_);
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

ad::Var flatten_rows(const ad::Var& x) {
  const auto& s = x.shape();
  if (s.size() == 2) return x;
  return ad::reshape(x, {s[0], shape_size(s) / s[0]});
}

bool poolable(const ad::Var& x) { return x.shape()[2] >= 2 && x.shape()[3] >= 2; }

ad::Var conv_block(ParamBinder& p, const std::string& prefix, const ad::Var& x, bool pool) {
  ad::Var y = ad::relu(ad::conv2d(x, p.get(prefix + ".w"), p.get(prefix + ".b")));
  return pool && poolable(y) ? ad::avg_pool2(y) : y;
}

// x + relu(layer(x))
ad::Var residual(ParamBinder& p, const std::string& prefix, const ad::Var& x) {
  return ad::add(x, ad::relu(linear(p, prefix, x)));
}

}  // namespace

ParamStore init_params(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Initializer init(seed);
  ParamStore ps;
  const std::size_t D = cfg.feature_dim, H = cfg.hidden, Nb = cfg.num_base_classes;

  if (cfg.backbone == BackboneKind::kFullyConnected) {
    std::size_t in = shape_size(cfg.input_shape);
    for (std::size_t b = 1; b < cfg.num_blocks; ++b, in = H) init.linear(ps, block("backbone", b), in, H);
    init.linear(ps, block("backbone", cfg.num_blocks), H, D);
    init.linear(ps, "metacnn.hidden", H, H);
    init.linear(ps, "metacnn.out", H, D, /*zero=*/true);
  } else {
    std::size_t in = cfg.input_shape[0];
    for (std::size_t b = 1; b <= cfg.num_blocks; ++b, in = H) init.conv(ps, block("backbone", b), in, H);
    init.linear(ps, "backbone.out", H, D);
    init.conv(ps, "metacnn.conv", H, H);
    init.linear(ps, "metacnn.out", H, D, /*zero=*/true);
  }
  ps["classifier.base_weights"] = init.gaussian({Nb, D}, std::sqrt(1.0 / D));
  ps["classifier.tau"] = Tensor({1}, cfg.cosine_scale_init);

  for (const char* head : {"mergenet.pre", "mergenet.meta"}) {
    for (std::size_t l = 1; l < cfg.mergenet_depth; ++l)
      init.linear(ps, std::string(head) + ".l" + std::to_string(l), 2 * D, 2 * D);
    init.linear(ps, std::string(head) + ".l" + std::to_string(cfg.mergenet_depth), 2 * D, D, true);
  }
  for (const char* head : {"tconnet.gamma", "tconnet.beta"}) {
    init.linear(ps, std::string(head) + ".l1", D, D);
    init.linear(ps, std::string(head) + ".l2", D, D);
    init.linear(ps, std::string(head) + ".l3", D, D, true);
  }
  init.linear(ps, "tconnet.lambda.l1", Nb, Nb);
  init.linear(ps, "tconnet.lambda.l2", Nb, Nb);
  init.linear(ps, "tconnet.lambda.l3", Nb, Nb);

  ps["tapnet.refs"] = init.gaussian({cfg.n_way, D}, 1.0);

  ps["lwof.phi_avg"] = Tensor({1, D}, 1.0);
  ps["lwof.phi_att"] = Tensor({1, D}, 1.0);
  ps["lwof.keys"] = init.gaussian({Nb, D}, 1.0);
  ps["lwof.gamma"] = Tensor({1}, 10.0);
  return ps;
}

std::vector<std::string> pretrain_parameter_names(const NetworkConfig& cfg) {
  std::vector<std::string> names;
  for (std::size_t b = 1; b <= cfg.num_blocks; ++b)
    for (const char* s : {".w", ".b"}) names.push_back(block("backbone", b) + s);
  if (cfg.backbone == BackboneKind::kConvolutional)
    for (const char* s : {"backbone.out.w", "backbone.out.b"}) names.emplace_back(s);
  names.emplace_back("classifier.base_weights");
  if (cfg.metric == MetricMode::kCosine) names.emplace_back("classifier.tau");
  return names;
}

std::vector<std::string> meta_parameter_names(const NetworkConfig& cfg, const StageFlags& stages) {
  std::vector<std::string> names;
  auto add_linear = [&](const std::string& prefix) {
    names.push_back(prefix + ".w");
    names.push_back(prefix + ".b");
  };
  if (stages.metacnn) {
    add_linear(cfg.backbone == BackboneKind::kFullyConnected ? "metacnn.hidden" : "metacnn.conv");
    add_linear("metacnn.out");
  }
  if (stages.mergenet)
    for (const char* head : {"mergenet.pre", "mergenet.meta"})
      for (std::size_t l = 1; l <= cfg.mergenet_depth; ++l)
        add_linear(std::string(head) + ".l" + std::to_string(l));
  if (stages.tconnet)
    for (const char* head : {"tconnet.gamma", "tconnet.beta", "tconnet.lambda"})
      for (int l = 1; l <= 3; ++l) add_linear(std::string(head) + ".l" + std::to_string(l));
  if (cfg.variant == NovelVariant::kTapNet) names.emplace_back("tapnet.refs");
  if (cfg.variant == NovelVariant::kLwoF)
    for (const char* s : {"lwof.phi_avg", "lwof.phi_att", "lwof.keys", "lwof.gamma"})
      names.emplace_back(s);
  return names;
}

ParamBinder::ParamBinder(ad::Tape& tape, const ParamStore& params, Predicate trainable)
    : tape_(tape), params_(params), trainable_(std::move(trainable)) {}

ad::Var ParamBinder::get(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  auto it = params_.find(name);
  require(it != params_.end(), ErrorCode::kInvalidArgument, "unknown parameter " + name);
  const bool train = trainable_ && trainable_(name);
  ad::Var v = tape_.leaf(it->second, train);
  bound_.emplace(name, v);
  return v;
}

GradMap ParamBinder::gradients(const std::vector<std::string>& names) const {
  GradMap out;
  for (const auto& n : names) {
    if (auto it = bound_.find(n); it != bound_.end())
      out[n] = tape_.grad(it->second);
    else
      out[n] = Tensor(params_.at(n).shape(), 0.0);
  }
  return out;
}

ad::Var linear(ParamBinder& p, const std::string& prefix, const ad::Var& x) {
  return ad::add_row(ad::matmul(x, p.get(prefix + ".w")), p.get(prefix + ".b"));
}

BackboneOutput backbone_forward(ParamBinder& p, const NetworkConfig& cfg, const Tensor& inputs) {
  require(inputs.rank() == cfg.input_shape.size() + 1 &&
              std::equal(cfg.input_shape.begin(), cfg.input_shape.end(), inputs.shape().begin() + 1),
          ErrorCode::kShapeMismatch,
          "backbone input " + shape_string(inputs.shape()) + " does not match [B]+" +
              shape_string(cfg.input_shape));
  BackboneOutput out;
  ad::Var x = p.tape().constant(inputs);
  if (cfg.backbone == BackboneKind::kFullyConnected) {
    x = flatten_rows(x);
    for (std::size_t b = 1; b < cfg.num_blocks; ++b) {
      x = ad::relu(linear(p, block("backbone", b), x));
      if (b == cfg.tap_index) out.tap = x;
    }
    out.feature = linear(p, block("backbone", cfg.num_blocks), x);
  } else {
    for (std::size_t b = 1; b < cfg.num_blocks; ++b) {
      x = conv_block(p, block("backbone", b), x, /*pool=*/true);
      if (b == cfg.tap_index) out.tap = x;
    }
    x = ad::global_avg_pool(conv_block(p, block("backbone", cfg.num_blocks), x, false));
    out.feature = linear(p, "backbone.out", x);
  }
  return out;
}

ad::Var metacnn_forward(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& tap) {
  const Shape expect = cfg.tap_shape();
  require(tap.shape().size() == expect.size() + 1 &&
              std::equal(expect.begin(), expect.end(), tap.shape().begin() + 1),
          ErrorCode::kShapeMismatch,
          "MetaCNN input " + shape_string(tap.shape()) + " does not match tap shape");
  if (cfg.backbone == BackboneKind::kFullyConnected)
    return linear(p, "metacnn.out", ad::relu(linear(p, "metacnn.hidden", tap)));
  ad::Var y = ad::global_avg_pool(conv_block(p, "metacnn.conv", tap, false));
  return linear(p, "metacnn.out", y);
}

Mixture mergenet_forward(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& c) {
  require(c.rows() == 1 && c.cols() == 2 * cfg.feature_dim, ErrorCode::kShapeMismatch,
          "MergeNet input must be [1, 2D]");
  auto head = [&](const std::string& name) {
    ad::Var x = c;
    for (std::size_t l = 1; l < cfg.mergenet_depth; ++l)
      x = ad::relu(linear(p, name + ".l" + std::to_string(l), x));
    ad::Var u = linear(p, name + ".l" + std::to_string(cfg.mergenet_depth), x);
    return ad::scale(ad::sigmoid(u), 2.0);
  };
  return {head("mergenet.pre"), head("mergenet.meta")};
}

namespace {

// Skip connections on both hidden layers; the zero-initialised output layer
// carries none so the conditioning starts at exactly zero.
ad::Var conditioning_head(ParamBinder& p, const std::string& name, const ad::Var& x) {
  ad::Var y = residual(p, name + ".l1", x);
  y = residual(p, name + ".l2", y);
  return linear(p, name + ".l3", y);
}

}  // namespace

ad::Var tconnet_gamma(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& c_star) {
  require(c_star.cols() == cfg.feature_dim, ErrorCode::kShapeMismatch, "h_gamma input length");
  return conditioning_head(p, "tconnet.gamma", c_star);
}

ad::Var tconnet_beta(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& c_star) {
  require(c_star.cols() == cfg.feature_dim, ErrorCode::kShapeMismatch, "h_beta input length");
  return conditioning_head(p, "tconnet.beta", c_star);
}

ad::Var tconnet_lambda(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& sigma) {
  require(sigma.cols() == cfg.num_base_classes, ErrorCode::kShapeMismatch,
          "h_lambda input must have N_b columns");
  ad::Var y = ad::relu(linear(p, "tconnet.lambda.l1", sigma));
  y = residual(p, "tconnet.lambda.l2", y);
  return ad::add(y, linear(p, "tconnet.lambda.l3", y));
}

LwofOutput lwof_generate(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& prototypes,
                         const ad::Var& base_weights, std::span<const std::size_t> active_base) {
  require(prototypes.cols() == cfg.feature_dim && base_weights.cols() == cfg.feature_dim,
          ErrorCode::kShapeMismatch, "LwoF inputs must have D columns");
  ad::Var c_hat = ad::row_normalize(prototypes);
  ad::Var w_hat = ad::row_normalize(base_weights);
  ad::Var keys = ad::row_normalize(p.get("lwof.keys"));
  require(keys.rows() == w_hat.rows(), ErrorCode::kShapeMismatch,
          "LwoF needs one key per base weight row");
  if (!active_base.empty()) {
    w_hat = ad::gather_rows(w_hat, active_base);
    keys = ad::gather_rows(keys, active_base);
  }
  ad::Var cos = ad::matmul(c_hat, ad::transpose(keys));  // [N, N_b]
  ad::Var att = ad::softmax_rows(ad::scale_by(cos, p.get("lwof.gamma")));
  ad::Var attended = ad::matmul(att, ad::mul_row(w_hat, p.get("lwof.phi_att")));
  ad::Var w = ad::add(ad::mul_row(c_hat, p.get("lwof.phi_avg")), attended);
  return {w, att};
}

}  // namespace xtar
