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

#include "xtar/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "xtar/error.hpp"

namespace xtar {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
  for (auto e : shape_)
    require(e > 0, ErrorCode::kShapeMismatch, "tensor extents must be positive");
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  for (auto e : shape_)
    require(e > 0, ErrorCode::kShapeMismatch, "tensor extents must be positive");
  require(shape_size(shape_) == values_.size(), ErrorCode::kShapeMismatch,
          "value count " + std::to_string(values_.size()) +
              " does not match shape " + shape_string(shape_));
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? 1 : shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? shape_[0] : values_.size() / shape_[0];
}

double Tensor::item() const {
  require(values_.size() == 1, ErrorCode::kShapeMismatch,
          "item() on tensor of shape " + shape_string(shape_));
  return values_[0];
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(values_).subspan(r * c, c);
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(values_).subspan(r * c, c);
}

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_size(shape) == values_.size(), ErrorCode::kShapeMismatch,
          "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  return Tensor(std::move(shape), values_);
}

Tensor Tensor::slice(std::size_t begin, std::size_t end) const {
  require(rank() >= 1 && begin < end && end <= shape_[0],
          ErrorCode::kShapeMismatch, "slice out of range");
  const std::size_t stride = values_.size() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s),
                std::vector<double>(values_.begin() + begin * stride,
                                    values_.begin() + end * stride));
}

Tensor Tensor::gather(std::span<const std::size_t> rows) const {
  require(rank() >= 1 && !rows.empty(), ErrorCode::kShapeMismatch,
          "gather needs a non-empty row list");
  const std::size_t stride = values_.size() / shape_[0];
  Shape s = shape_;
  s[0] = rows.size();
  std::vector<double> out;
  out.reserve(rows.size() * stride);
  for (auto r : rows) {
    require(r < shape_[0], ErrorCode::kShapeMismatch, "gather row out of range");
    out.insert(out.end(), values_.begin() + r * stride,
               values_.begin() + (r + 1) * stride);
  }
  return Tensor(std::move(s), std::move(out));
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), ErrorCode::kShapeMismatch, "concat of nothing");
  Shape s = parts[0].shape();
  std::size_t lead = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    require(p.rank() == s.size() &&
                std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1),
            ErrorCode::kShapeMismatch, "concat_rows trailing extents differ");
    lead += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  s[0] = lead;
  return Tensor(std::move(s), std::move(out));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, ErrorCode::kShapeMismatch,
          "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* br = &b[p * n];
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::kShapeMismatch, "dot length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_norm(std::span<const double> a) { return dot(a, a); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.size() == b.size(), ErrorCode::kShapeMismatch,
          "max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace xtar
