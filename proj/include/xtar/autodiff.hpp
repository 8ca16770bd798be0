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
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "xtar/tensor.hpp"

namespace xtar::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records primitive operations during a forward pass and replays them in
/// reverse. One tape per episode; a tape is not thread-safe.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Throws kNonFinite naming `op` if the value contains NaN/Inf.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs,
             BackwardFn backward);
  Var record(const char* op, Tensor value, std::span<const Var> inputs,
             BackwardFn backward);

  const Tensor& value(const Var& v) const { return nodes_[v.id()].value; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }
  // Zero-initialised on first access; ops accumulate into it.
  Tensor& grad_slot(const Var& v);

  void backward(const Var& loss);
  // Gradient after backward(); zeros when the var was not reached.
  Tensor grad(const Var& v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    BackwardFn backward;
    const char* op = "leaf";
  };
  std::deque<Node> nodes_;
};

// ---- primitives -----------------------------------------------------------
// Matrices are rank-2 [rows x cols]; a "row vector" is [1 x n].

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
// a * s where s is a 1-element var.
Var scale_by(const Var& a, const Var& s);
// Broadcast a [1 x n] row across the rows of a [m x n] matrix.
Var add_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);
Var repeat_rows(const Var& row, std::size_t m);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
Var mean_rows(const Var& a);
Var concat_cols(const Var& a, const Var& b);
Var concat_rows(std::span<const Var> parts);
Var gather_rows(const Var& a, std::span<const std::size_t> rows);
Var reshape(const Var& a, Shape shape);

// Rows divided by their Euclidean norm; rows with norm < 1e-12 are an error.
Var row_normalize(const Var& a);
// out[i][j] = ||a_i - b_j||^2
Var sq_distances(const Var& a, const Var& b);
Var softmax_rows(const Var& a);
// Mean over rows of log-sum-exp(logits_i) - logits_i[labels_i].
Var cross_entropy(const Var& logits, std::span<const std::size_t> labels);

// NCHW convolution, odd square kernel, stride 1, zero "same" padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias);
Var avg_pool2(const Var& x);
Var global_avg_pool(const Var& x);

}  // namespace xtar::ad
