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
#include <map>
#include <string>

#include "xtar/tensor.hpp"

namespace xtar {

using ParamStore = std::map<std::string, Tensor>;
using GradMap = std::map<std::string, Tensor>;

struct SgdOptions {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t decay_every = 4000;
  double decay_factor = 0.1;
};

// Momentum SGD with l2 folded into the gradient and a step-decayed rate.
struct OptimizerState {
  SgdOptions options;
  std::uint64_t step_count = 0;
  std::map<std::string, Tensor> velocity;

  double effective_learning_rate() const;
};

OptimizerState make_optimizer(const SgdOptions& options);

// Updates every parameter named in `grads`:
//   v <- momentum * v + (grad + weight_decay * p);  p <- p - lr_eff * v
// then increments step_count. Throws on shape mismatch or non-finite grads;
// nothing is modified when it throws.
void sgd_step(ParamStore& params, const GradMap& grads, OptimizerState& state);

}  // namespace xtar
