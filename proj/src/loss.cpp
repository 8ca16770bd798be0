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

#include "xtar/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "xtar/error.hpp"

namespace xtar {

double log_sum_exp(std::span<const double> x) {
  require(!x.empty(), ErrorCode::kInvalidArgument, "log_sum_exp of empty vector");
  const double mx = *std::max_element(x.begin(), x.end());
  require(std::isfinite(mx), ErrorCode::kNonFinite, "log_sum_exp: non-finite logits");
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

double softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
  require(label < logits.size(), ErrorCode::kInvalidArgument,
          "label " + std::to_string(label) + " out of range for " +
              std::to_string(logits.size()) + " classes");
  return log_sum_exp(logits) - logits[label];
}

std::vector<double> softmax(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logits[i] - lse);
  return p;
}

std::size_t argmax(std::span<const double> x) {
  require(!x.empty(), ErrorCode::kInvalidArgument, "argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

}  // namespace xtar
