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
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace xtar {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Features, weights and images all live
/// in this type; rank-2 tensors are treated as row-per-sample matrices.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const { return values_.empty(); }

  // Matrix view: rank-1 tensors are a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return values_[i]; }
  const double& operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double item() const;

  std::span<double> data() { return values_; }
  std::span<const double> data() const { return values_; }
  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);
  const std::vector<double>& values() const { return values_; }

  Tensor reshaped(Shape shape) const;
  // Rows [begin, end) of the leading dimension.
  Tensor slice(std::size_t begin, std::size_t end) const;
  Tensor gather(std::span<const std::size_t> rows) const;

  bool all_finite() const;
  bool requires_grad = false;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<double> values_;
};

// Leading-dimension concatenation; trailing extents must agree.
Tensor concat_rows(std::span<const Tensor> parts);

// Plain (non-differentiable) helpers used by oracles, analysis and linalg.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace xtar
