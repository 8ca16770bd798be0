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

#include "xtar/optim.hpp"

#include <cmath>

#include "xtar/error.hpp"

namespace xtar {

double OptimizerState::effective_learning_rate() const {
  const auto drops = static_cast<double>(step_count / options.decay_every);
  return options.learning_rate * std::pow(options.decay_factor, drops);
}

OptimizerState make_optimizer(const SgdOptions& options) {
  require(options.learning_rate >= 0.0, ErrorCode::kInvalidArgument,
          "learning rate must be non-negative");
  require(options.momentum >= 0.0 && options.momentum < 1.0, ErrorCode::kInvalidArgument,
          "momentum must lie in [0, 1)");
  require(options.weight_decay >= 0.0, ErrorCode::kInvalidArgument,
          "weight decay must be non-negative");
  require(options.decay_every > 0, ErrorCode::kInvalidArgument, "decay_every must be positive");
  require(options.decay_factor > 0.0, ErrorCode::kInvalidArgument,
          "decay_factor must be positive");
  OptimizerState s;
  s.options = options;
  return s;
}

void sgd_step(ParamStore& params, const GradMap& grads, OptimizerState& state) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    require(it != params.end(), ErrorCode::kInvalidArgument, "gradient for unknown parameter " + name);
    require(it->second.shape() == g.shape(), ErrorCode::kShapeMismatch,
            "gradient shape mismatch for " + name);
    require(g.all_finite(), ErrorCode::kNonFinite, "non-finite gradient for " + name);
  }
  const double lr = state.effective_learning_rate();
  const double mu = state.options.momentum;
  const double wd = state.options.weight_decay;
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [vit, inserted] = state.velocity.try_emplace(name, Tensor(p.shape(), 0.0));
    Tensor& v = vit->second;
    require(v.shape() == p.shape(), ErrorCode::kShapeMismatch, "velocity shape mismatch for " + name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mu * v[i] + (g[i] + wd * p[i]);
      p[i] -= lr * v[i];
    }
  }
  ++state.step_count;
}

}  // namespace xtar
