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
#include <vector>

#include "xtar/tensor.hpp"

namespace xtar {

struct RightSvd {
  Tensor v;                    // D x D orthogonal, columns are right singular vectors
  std::vector<double> sigma;   // singular value per column of v (unsorted)
  int sweeps = 0;
};

// One-sided (Hestenes) Jacobi on the columns of `a`. Intended for the small
// wide matrices of the projection step (rows <= a handful, D <= a few hundred).
RightSvd jacobi_right_svd(const Tensor& a, int max_sweeps = 60);

/// Orthonormal basis for the (approximate) null space of the rows of `e`.
///
/// For an N x D matrix with D > N, returns D x (D - N) whose columns are the
/// right singular vectors with the smallest singular values. When rank(e) <= N
/// the result satisfies e * M == 0 up to rounding.
Tensor null_space(const Tensor& e);

}  // namespace xtar
