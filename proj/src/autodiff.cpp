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

#include "xtar/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "xtar/error.hpp"

namespace xtar::ad {

const Tensor& Var::value() const {
  require(tape_ != nullptr, ErrorCode::kState, "use of an unbound Var");
  return tape_->value(*this);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  require(value.all_finite(), ErrorCode::kNonFinite, "non-finite leaf value");
  Node n;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn backward) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> inputs,
                 BackwardFn backward) {
  if (!value.all_finite())
    fail(ErrorCode::kNonFinite, std::string("non-finite value produced by ") + op);
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (const auto& in : inputs) {
    require(in.tape() == this, ErrorCode::kState,
            std::string(op) + ": operand belongs to another tape");
    n.needs_grad = n.needs_grad || nodes_[in.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_slot(const Var& v) {
  Node& n = nodes_[v.id()];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(const Var& loss) {
  require(loss.tape() == this, ErrorCode::kState, "loss belongs to another tape");
  const Tensor& lv = value(loss);
  require(lv.size() == 1, ErrorCode::kShapeMismatch,
          "backward needs a scalar loss, got " + shape_string(lv.shape()));
  require(std::isfinite(lv[0]), ErrorCode::kNonFinite, "non-finite loss");
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id()].needs_grad) return;
  grad_slot(loss)[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
    if (!n.grad.all_finite())
      fail(ErrorCode::kNonFinite, std::string("non-finite gradient at ") + n.op);
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

namespace {

Tape& tape_of(const Var& a) {
  require(a.valid(), ErrorCode::kState, "use of an unbound Var");
  return *a.tape();
}

void same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::kShapeMismatch,
          std::string(op) + ": " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
}

void require_matrix(const Var& a, const char* op) {
  require(a.value().rank() == 2, ErrorCode::kShapeMismatch,
          std::string(op) + " expects a matrix, got " + shape_string(a.shape()));
}

template <class F>
Var unary(const char* op, const Var& a, F&& fwd_and_deriv) {
  // fwd_and_deriv(x) -> {y, dy/dx}
  const Tensor& x = a.value();
  Tensor y(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto [yi, di] = fwd_and_deriv(x[i]);
    y[i] = yi;
    d[i] = di;
  }
  return tape_of(a).record(op, std::move(y), {a},
                           [a, d = std::move(d)](Tape& t, const Tensor& g) {
                             Tensor& ga = t.grad_slot(a);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * d[i];
                           });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  Tensor out = xtar::matmul(a.value(), b.value());
  return tape_of(a).record("matmul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_slot(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_slot(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av_ip = av[i * k + p];
          if (av_ip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av_ip * g[i * n + j];
        }
    }
  });
}

Var transpose(const Var& a) {
  require_matrix(a, "transpose");
  return tape_of(a).record("transpose", xtar::transpose(a.value()), {a},
                           [a](Tape& t, const Tensor& g) {
                             Tensor& ga = t.grad_slot(a);
                             const Tensor gt = xtar::transpose(g);
                             for (std::size_t i = 0; i < gt.size(); ++i) ga[i] += gt[i];
                           });
}

Var add(const Var& a, const Var& b) {
  same_shape(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape_of(a).record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    for (const Var& v : {a, b}) {
      if (!t.needs_grad(v)) continue;
      Tensor& gv = t.grad_slot(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape_of(a).record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_slot(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_slot(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape_of(a).record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_slot(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_slot(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= c;
  return tape_of(a).record("scale", std::move(out), {a}, [a, c](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += c;
  return tape_of(a).record("add_scalar", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var scale_by(const Var& a, const Var& s) {
  require(s.value().size() == 1, ErrorCode::kShapeMismatch, "scale_by needs a scalar");
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (auto& v : out.data()) v *= sv;
  return tape_of(a).record("scale_by", std::move(out), {a, s}, [a, s](Tape& t, const Tensor& g) {
    const double sv = t.value(s)[0];
    const Tensor& av = t.value(a);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_slot(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += sv * g[i];
    }
    if (t.needs_grad(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      t.grad_slot(s)[0] += acc;
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  require_matrix(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  require(row.value().size() == n, ErrorCode::kShapeMismatch, "add_row width mismatch");
  Tensor out = a.value();
  const Tensor& rv = row.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  return tape_of(a).record("add_row", std::move(out), {a, row},
                           [a, row, m, n](Tape& t, const Tensor& g) {
                             if (t.needs_grad(a)) {
                               Tensor& ga = t.grad_slot(a);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                             }
                             if (t.needs_grad(row)) {
                               Tensor& gr = t.grad_slot(row);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
                             }
                           });
}

Var mul_row(const Var& a, const Var& row) {
  require_matrix(a, "mul_row");
  const std::size_t m = a.rows(), n = a.cols();
  require(row.value().size() == n, ErrorCode::kShapeMismatch, "mul_row width mismatch");
  Tensor out = a.value();
  const Tensor& rv = row.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= rv[j];
  return tape_of(a).record("mul_row", std::move(out), {a, row},
                           [a, row, m, n](Tape& t, const Tensor& g) {
                             const Tensor& av = t.value(a);
                             const Tensor& rv = t.value(row);
                             if (t.needs_grad(a)) {
                               Tensor& ga = t.grad_slot(a);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j)
                                   ga[i * n + j] += g[i * n + j] * rv[j];
                             }
                             if (t.needs_grad(row)) {
                               Tensor& gr = t.grad_slot(row);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j)
                                   gr[j] += g[i * n + j] * av[i * n + j];
                             }
                           });
}

Var repeat_rows(const Var& row, std::size_t m) {
  const std::size_t n = row.value().size();
  Tensor out({m, n});
  const Tensor& rv = row.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = rv[j];
  return tape_of(row).record("repeat_rows", std::move(out), {row},
                             [row, m, n](Tape& t, const Tensor& g) {
                               Tensor& gr = t.grad_slot(row);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
                             });
}

Var relu(const Var& a) {
  return unary("relu", a, [](double x) {
    return std::pair{x > 0.0 ? x : 0.0, x > 0.0 ? 1.0 : 0.0};
  });
}

Var sigmoid(const Var& a) {
  return unary("sigmoid", a, [](double x) {
    const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                              : std::exp(x) / (1.0 + std::exp(x));
    return std::pair{s, s * (1.0 - s)};
  });
}

Var exp(const Var& a) {
  return unary("exp", a, [](double x) {
    const double e = std::exp(x);
    return std::pair{e, e};
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return tape_of(a).record("sum", Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    for (auto& v : ga.data()) v += g[0];
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mean_rows(const Var& a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({1, n});
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
  for (auto& v : out.data()) v /= static_cast<double>(m);
  return tape_of(a).record("mean_rows", std::move(out), {a}, [a, m, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
  });
}

Var concat_cols(const Var& a, const Var& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  require(b.rows() == m, ErrorCode::kShapeMismatch, "concat_cols row mismatch");
  Tensor out({m, p + q});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(&av[i * p], p, &out[i * (p + q)]);
    std::copy_n(&bv[i * q], q, &out[i * (p + q) + p]);
  }
  return tape_of(a).record("concat_cols", std::move(out), {a, b},
                           [a, b, m, p, q](Tape& t, const Tensor& g) {
                             if (t.needs_grad(a)) {
                               Tensor& ga = t.grad_slot(a);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < p; ++j)
                                   ga[i * p + j] += g[i * (p + q) + j];
                             }
                             if (t.needs_grad(b)) {
                               Tensor& gb = t.grad_slot(b);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < q; ++j)
                                   gb[i * q + j] += g[i * (p + q) + p + j];
                             }
                           });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::kShapeMismatch, "concat_rows of nothing");
  std::vector<Tensor> values;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    values.push_back(p.value());
    offsets.push_back(off);
    off += p.value().size();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return tape_of(parts[0]).record(
      "concat_rows", xtar::concat_rows(values), parts,
      [ins, offsets = std::move(offsets)](Tape& t, const Tensor& g) {
        for (std::size_t k = 0; k < ins.size(); ++k) {
          if (!t.needs_grad(ins[k])) continue;
          Tensor& gp = t.grad_slot(ins[k]);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
        }
      });
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  Tensor out = a.value().gather(rows);
  const std::size_t stride = a.value().size() / a.value().dim(0);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape_of(a).record("gather_rows", std::move(out), {a},
                           [a, idx = std::move(idx), stride](Tape& t, const Tensor& g) {
                             Tensor& ga = t.grad_slot(a);
                             for (std::size_t k = 0; k < idx.size(); ++k)
                               for (std::size_t j = 0; j < stride; ++j)
                                 ga[idx[k] * stride + j] += g[k * stride + j];
                           });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record("reshape", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var row_normalize(const Var& a) {
  require_matrix(a, "row_normalize");
  const std::size_t m = a.rows(), n = a.cols();
  const Tensor& av = a.value();
  Tensor out({m, n});
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    norms[i] = std::sqrt(squared_norm(av.row(i)));
    require(norms[i] >= 1e-12, ErrorCode::kInvalidArgument,
            "row_normalize: zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] / norms[i];
  }
  Tensor unit = out;
  return tape_of(a).record(
      "row_normalize", std::move(out), {a},
      [a, m, n, norms = std::move(norms), unit = std::move(unit)](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_slot(a);
        for (std::size_t i = 0; i < m; ++i) {
          double gu = 0.0;
          for (std::size_t j = 0; j < n; ++j) gu += g[i * n + j] * unit[i * n + j];
          for (std::size_t j = 0; j < n; ++j)
            ga[i * n + j] += (g[i * n + j] - gu * unit[i * n + j]) / norms[i];
        }
      });
}

Var sq_distances(const Var& a, const Var& b) {
  require_matrix(a, "sq_distances");
  require_matrix(b, "sq_distances");
  const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
  require(b.cols() == d, ErrorCode::kShapeMismatch, "sq_distances width mismatch");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = av[i * d + k] - bv[j * d + k];
        s += diff * diff;
      }
      out[i * n + j] = s;
    }
  return tape_of(a).record("sq_distances", std::move(out), {a, b},
                           [a, b, m, n, d](Tape& t, const Tensor& g) {
                             const Tensor& av = t.value(a);
                             const Tensor& bv = t.value(b);
                             const bool need_a = t.needs_grad(a), need_b = t.needs_grad(b);
                             Tensor* ga = need_a ? &t.grad_slot(a) : nullptr;
                             Tensor* gb = need_b ? &t.grad_slot(b) : nullptr;
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) {
                                 const double gij = 2.0 * g[i * n + j];
                                 if (gij == 0.0) continue;
                                 for (std::size_t k = 0; k < d; ++k) {
                                   const double diff = av[i * d + k] - bv[j * d + k];
                                   if (ga) (*ga)[i * d + k] += gij * diff;
                                   if (gb) (*gb)[j * d + k] -= gij * diff;
                                 }
                               }
                           });
}

Var softmax_rows(const Var& a) {
  require_matrix(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  const Tensor& av = a.value();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(av[i * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Tensor p = out;
  return tape_of(a).record("softmax_rows", std::move(out), {a},
                           [a, m, n, p = std::move(p)](Tape& t, const Tensor& g) {
                             Tensor& ga = t.grad_slot(a);
                             for (std::size_t i = 0; i < m; ++i) {
                               double gp = 0.0;
                               for (std::size_t j = 0; j < n; ++j)
                                 gp += g[i * n + j] * p[i * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                 ga[i * n + j] += p[i * n + j] * (g[i * n + j] - gp);
                             }
                           });
}

Var cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  require(labels.size() == m, ErrorCode::kShapeMismatch, "cross_entropy label count");
  const Tensor& lv = logits.value();
  Tensor p({m, n});
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    require(labels[i] < n, ErrorCode::kInvalidArgument, "cross_entropy label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, lv[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (p[i * n + j] = std::exp(lv[i * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) p[i * n + j] /= z;
    loss += std::log(z) + mx - lv[i * n + labels[i]];
  }
  loss /= static_cast<double>(m);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return tape_of(logits).record(
      "cross_entropy", Tensor::scalar(loss), {logits},
      [logits, m, n, p = std::move(p), lab = std::move(lab)](Tape& t, const Tensor& g) {
        Tensor& gl = t.grad_slot(logits);
        const double s = g[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            gl[i * n + j] += s * (p[i * n + j] - (j == lab[i] ? 1.0 : 0.0));
      });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require(xv.rank() == 4 && wv.rank() == 4, ErrorCode::kShapeMismatch,
          "conv2d expects NCHW input and OCkk weights");
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t O = wv.dim(0), k = wv.dim(2);
  require(wv.dim(1) == C && wv.dim(3) == k && k % 2 == 1, ErrorCode::kShapeMismatch,
          "conv2d weight shape " + shape_string(wv.shape()));
  require(bias.value().size() == O, ErrorCode::kShapeMismatch, "conv2d bias length");
  const long pad = static_cast<long>(k / 2);
  Tensor out({B, O, H, W});
  const Tensor& bv = bias.value();
  auto in_at = [&](std::size_t b, std::size_t c, long h, long w) -> double {
    if (h < 0 || w < 0 || h >= static_cast<long>(H) || w >= static_cast<long>(W)) return 0.0;
    return xv[((b * C + c) * H + h) * W + w];
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          double s = bv[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < k; ++i)
              for (std::size_t j = 0; j < k; ++j)
                s += wv[((o * C + c) * k + i) * k + j] *
                     in_at(b, c, static_cast<long>(h + i) - pad, static_cast<long>(w + j) - pad);
          out[((b * O + o) * H + h) * W + w] = s;
        }
  return tape_of(x).record(
      "conv2d", std::move(out), {x, weight, bias},
      [x, weight, bias, B, C, H, W, O, k, pad](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        const Tensor& wv = t.value(weight);
        Tensor* gx = t.needs_grad(x) ? &t.grad_slot(x) : nullptr;
        Tensor* gw = t.needs_grad(weight) ? &t.grad_slot(weight) : nullptr;
        Tensor* gb = t.needs_grad(bias) ? &t.grad_slot(bias) : nullptr;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t h = 0; h < H; ++h)
              for (std::size_t w = 0; w < W; ++w) {
                const double go = g[((b * O + o) * H + h) * W + w];
                if (go == 0.0) continue;
                if (gb) (*gb)[o] += go;
                for (std::size_t c = 0; c < C; ++c)
                  for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                      const long hh = static_cast<long>(h + i) - pad;
                      const long ww = static_cast<long>(w + j) - pad;
                      if (hh < 0 || ww < 0 || hh >= static_cast<long>(H) ||
                          ww >= static_cast<long>(W))
                        continue;
                      const std::size_t xi = ((b * C + c) * H + hh) * W + ww;
                      const std::size_t wi = ((o * C + c) * k + i) * k + j;
                      if (gw) (*gw)[wi] += go * xv[xi];
                      if (gx) (*gx)[xi] += go * wv[wi];
                    }
              }
      });
}

Var avg_pool2(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 4, ErrorCode::kShapeMismatch, "avg_pool2 expects NCHW");
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  require(H >= 2 && W >= 2, ErrorCode::kShapeMismatch, "avg_pool2 needs H,W >= 2");
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out({B, C, Ho, Wo});
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t h = 0; h < Ho; ++h)
      for (std::size_t w = 0; w < Wo; ++w) {
        const double* base = &xv[bc * H * W];
        out[(bc * Ho + h) * Wo + w] =
            0.25 * (base[2 * h * W + 2 * w] + base[2 * h * W + 2 * w + 1] +
                    base[(2 * h + 1) * W + 2 * w] + base[(2 * h + 1) * W + 2 * w + 1]);
      }
  return tape_of(x).record("avg_pool2", std::move(out), {x},
                           [x, B, C, H, W, Ho, Wo](Tape& t, const Tensor& g) {
                             Tensor& gx = t.grad_slot(x);
                             for (std::size_t bc = 0; bc < B * C; ++bc)
                               for (std::size_t h = 0; h < Ho; ++h)
                                 for (std::size_t w = 0; w < Wo; ++w) {
                                   const double v = 0.25 * g[(bc * Ho + h) * Wo + w];
                                   double* base = &gx[bc * H * W];
                                   base[2 * h * W + 2 * w] += v;
                                   base[2 * h * W + 2 * w + 1] += v;
                                   base[(2 * h + 1) * W + 2 * w] += v;
                                   base[(2 * h + 1) * W + 2 * w + 1] += v;
                                 }
                           });
}

Var global_avg_pool(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 4, ErrorCode::kShapeMismatch, "global_avg_pool expects NCHW");
  const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor out({B, C});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += xv[bc * HW + i];
    out[bc] = s / static_cast<double>(HW);
  }
  return tape_of(x).record("global_avg_pool", std::move(out), {x},
                           [x, B, C, HW](Tape& t, const Tensor& g) {
                             Tensor& gx = t.grad_slot(x);
                             const double inv = 1.0 / static_cast<double>(HW);
                             for (std::size_t bc = 0; bc < B * C; ++bc)
                               for (std::size_t i = 0; i < HW; ++i) gx[bc * HW + i] += g[bc] * inv;
                           });
}

}  // namespace xtar::ad
