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

#include "xtar/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xtar/error.hpp"

namespace xtar {

RightSvd jacobi_right_svd(const Tensor& a, int max_sweeps) {
  require(a.rank() == 2, ErrorCode::kShapeMismatch, "jacobi_right_svd expects a matrix");
  require(a.all_finite(), ErrorCode::kNonFinite, "jacobi_right_svd: non-finite input");
  const std::size_t n = a.rows(), d = a.cols();

  // Column-major working copies: cols[j] is column j of A (length n), vcols[j]
  // is column j of V (length d).
  std::vector<std::vector<double>> cols(d, std::vector<double>(n));
  std::vector<std::vector<double>> vcols(d, std::vector<double>(d, 0.0));
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) cols[j][i] = a.at(i, j);
    vcols[j][j] = 1.0;
  }

  constexpr double kTol = 1e-15;
  RightSvd out;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        auto& ap = cols[p];
        auto& aq = cols[q];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          alpha += ap[i] * ap[i];
          beta += aq[i] * aq[i];
          gamma += ap[i] * aq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = ap[i], y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        auto& vp = vcols[p];
        auto& vq = vcols[q];
        for (std::size_t i = 0; i < d; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    out.sweeps = sweep + 1;
    if (!rotated) break;
  }

  out.v = Tensor({d, d});
  out.sigma.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    out.sigma[j] = std::sqrt(squared_norm(cols[j]));
    for (std::size_t i = 0; i < d; ++i) out.v.at(i, j) = vcols[j][i];
  }
  return out;
}

Tensor null_space(const Tensor& e) {
  require(e.rank() == 2, ErrorCode::kShapeMismatch, "null_space expects a matrix");
  const std::size_t n = e.rows(), d = e.cols();
  require(d > n, ErrorCode::kInvalidArgument,
          "null_space needs more columns than rows (D=" + std::to_string(d) +
              ", N=" + std::to_string(n) + ")");
  require(e.all_finite(), ErrorCode::kNonFinite, "null_space: non-finite input");

  const RightSvd svd = jacobi_right_svd(e);
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return svd.sigma[x] < svd.sigma[y];
  });

  const std::size_t width = d - n;
  Tensor m({d, width});
  for (std::size_t k = 0; k < width; ++k)
    for (std::size_t i = 0; i < d; ++i) m.at(i, k) = svd.v.at(i, order[k]);
  return m;
}

}  // namespace xtar
