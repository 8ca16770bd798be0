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
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xtar/autodiff.hpp"
#include "xtar/optim.hpp"
#include "xtar/tensor.hpp"

namespace xtar {

enum class BackboneKind : std::uint8_t { kFullyConnected, kConvolutional };
enum class NovelVariant : std::uint8_t { kImprint, kLwoF, kTapNet };
enum class MetricMode : std::uint8_t { kEuclideanProjected, kCosine };

const char* to_string(BackboneKind k);
const char* to_string(NovelVariant v);
const char* to_string(MetricMode m);
BackboneKind parse_backbone_kind(const std::string& s);
NovelVariant parse_variant(const std::string& s);
MetricMode parse_metric(const std::string& s);

// Which meta-trained modules take part. All-off is the plain baseline.
struct StageFlags {
  bool metacnn = true;
  bool mergenet = true;
  bool tconnet = true;

  friend bool operator==(const StageFlags&, const StageFlags&) = default;
};

struct NetworkConfig {
  Shape input_shape = {64};  // [d] for fully-connected, [C, H, W] for conv
  BackboneKind backbone = BackboneKind::kFullyConnected;
  std::size_t hidden = 128;      // FC width or conv channel count
  std::size_t num_blocks = 4;
  std::size_t tap_index = 3;     // a(x) is the output of the first tap_index blocks
  std::size_t feature_dim = 64;  // D
  std::size_t num_base_classes = 20;
  std::size_t n_way = 5;         // rows of the TapNet reference matrix
  std::size_t mergenet_depth = 4;
  NovelVariant variant = NovelVariant::kImprint;
  MetricMode metric = MetricMode::kCosine;
  double cosine_scale_init = 10.0;

  void validate() const;
  // Shape of a(x) for a single sample.
  Shape tap_shape() const;
};

/// He-initialised parameters for every module; the designated output layers
/// of MetaCNN, MergeNet and TconNet start at zero.
ParamStore init_params(const NetworkConfig& config, std::uint64_t seed);

std::vector<std::string> pretrain_parameter_names(const NetworkConfig& config);
std::vector<std::string> meta_parameter_names(const NetworkConfig& config, const StageFlags& stages);

/// Binds named parameters onto a tape on first use. Names accepted by
/// `trainable` become gradient-carrying leaves; everything else is constant.
class ParamBinder {
 public:
  using Predicate = std::function<bool(const std::string&)>;

  ParamBinder(ad::Tape& tape, const ParamStore& params, Predicate trainable = nullptr);

  ad::Var get(const std::string& name);
  ad::Tape& tape() { return tape_; }
  const ParamStore& params() const { return params_; }

  // Gradients for `names` after tape().backward(); unbound names get zeros.
  GradMap gradients(const std::vector<std::string>& names) const;

 private:
  ad::Tape& tape_;
  const ParamStore& params_;
  Predicate trainable_;
  std::map<std::string, ad::Var> bound_;
};

struct BackboneOutput {
  ad::Var tap;      // [B, tap_shape...]
  ad::Var feature;  // [B, D]
};

BackboneOutput backbone_forward(ParamBinder& p, const NetworkConfig& cfg, const Tensor& inputs);
// [B, tap_shape...] -> [B, D]
ad::Var metacnn_forward(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& tap);

struct Mixture {
  ad::Var omega_pre;   // [1, D], entries in (0, 2)
  ad::Var omega_meta;  // [1, D]
};
// c is the [1, 2D] task representation.
Mixture mergenet_forward(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& c);

// [1, D] -> [1, D]
ad::Var tconnet_gamma(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& c_star);
ad::Var tconnet_beta(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& c_star);
// [N, N_b] -> [N, N_b]
ad::Var tconnet_lambda(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& sigma);

struct LwofOutput {
  ad::Var weights;    // [N, D]
  ad::Var attention;  // [N, N_b], rows sum to one
};
// Attention-based novel weight generator over (unit-normalised) prototypes
// and base weights. A non-empty `active_base` restricts attention to those
// base rows; attention then has active_base.size() columns.
LwofOutput lwof_generate(ParamBinder& p, const NetworkConfig& cfg, const ad::Var& prototypes,
                         const ad::Var& base_weights,
                         std::span<const std::size_t> active_base = {});

// Fully-connected layer x W + b with W stored [in, out].
ad::Var linear(ParamBinder& p, const std::string& prefix, const ad::Var& x);

}  // namespace xtar
