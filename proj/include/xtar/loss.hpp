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

#include <cstddef>
#include <span>
#include <vector>

namespace xtar {

// Stable log(sum(exp(x))).
double log_sum_exp(std::span<const double> x);

// Natural-log cross entropy of one logit vector against a class index.
double softmax_cross_entropy(std::span<const double> logits, std::size_t label);

std::vector<double> softmax(std::span<const double> logits);

// Lowest index wins ties.
std::size_t argmax(std::span<const double> x);

}  // namespace xtar
