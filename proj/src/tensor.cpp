/*
 * Copyright 2026 DQMQ Contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "dqmq/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace dqmq {

namespace {

std::atomic<std::uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;
using EArr = Eigen::Map<Eigen::ArrayXf>;
using CEArr = Eigen::Map<const Eigen::ArrayXf>;
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check_finite(std::span<const float> v, const char* opname) {
  if (!CEArr(v.data(), static_cast<Eigen::Index>(v.size())).isFinite().all()) {
    throw NumericError(std::string(opname) + ": produced a non-finite value");
  }
}

NodePtr make_leaf(Shape shape, detail::FloatBuf data, bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return n;
}

/// Creates an op output node. Records parents and the backward rule only when
/// gradients are enabled and some parent requires them.
Tensor make_op(Shape shape, detail::FloatBuf value,
               std::vector<NodePtr> parents,
               std::function<void(detail::Node&)> backward_fn,
               const char* opname) {
  check_finite(value, opname);
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p->requires_grad) needs = true;
    }
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(std::move(n));
}

void acc_grad(detail::Node& p, const float* src, std::int64_t len) {
  if (!p.requires_grad) return;
  p.ensure_grad();
  EArr(p.grad.data(), len) += CEArr(src, len);
}

detail::Node& req(const Tensor& t, const char* opname) {
  if (!t.defined()) {
    throw ContractError(std::string(opname) + ": undefined tensor operand");
  }
  return *t.node();
}

struct BinShape {
  Shape out;
  bool a_scalar;
  bool b_scalar;
};

BinShape binary_shape(const detail::Node& a, const detail::Node& b,
                      const char* opname) {
  const bool as = a.size() == 1;
  const bool bs = b.size() == 1;
  if (a.shape == b.shape) return {a.shape, false, false};
  if (bs) return {a.shape, false, true};
  if (as) return {b.shape, true, false};
  throw DimensionError(std::string(opname) + ": shape mismatch " +
                       shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel(shape);
  if (n <= 0) throw ContractError("Tensor::zeros: shape must be positive, got " + shape_str(shape));
  return wrap(make_leaf(std::move(shape), detail::FloatBuf(static_cast<std::size_t>(n), 0.0f), requires_grad));
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
  auto n = numel(shape);
  if (n <= 0) throw ContractError("Tensor::full: shape must be positive, got " + shape_str(shape));
  return wrap(make_leaf(std::move(shape), detail::FloatBuf(static_cast<std::size_t>(n), v), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  if (numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("Tensor::from_data: shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
  }
  return wrap(make_leaf(std::move(shape), detail::FloatBuf(data.begin(), data.end()), requires_grad));
}

Tensor Tensor::scalar(float v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

const Shape& Tensor::shape() const { return req(*this, "shape").shape; }
std::int64_t Tensor::size() const { return req(*this, "size").size(); }

std::span<const float> Tensor::data() const {
  auto& n = req(*this, "data");
  return {n.value.data(), n.value.size()};
}

std::span<float> Tensor::mutable_data() {
  auto& n = req(*this, "mutable_data");
  return {n.value.data(), n.value.size()};
}

bool Tensor::requires_grad() const { return req(*this, "requires_grad").requires_grad; }

void Tensor::set_requires_grad(bool v) {
  auto& n = req(*this, "set_requires_grad");
  if (n.backward_fn) {
    throw ContractError("set_requires_grad: only leaf tensors may be toggled");
  }
  n.requires_grad = v;
}

bool Tensor::has_grad() const { return !req(*this, "has_grad").grad.empty(); }

std::span<const float> Tensor::grad() const {
  auto& n = req(*this, "grad");
  return {n.grad.data(), n.grad.size()};
}

std::span<float> Tensor::mutable_grad() {
  auto& n = req(*this, "mutable_grad");
  n.ensure_grad();
  return {n.grad.data(), n.grad.size()};
}

void Tensor::zero_grad() {
  auto& n = req(*this, "zero_grad");
  std::fill(n.grad.begin(), n.grad.end(), 0.0f);
}

float Tensor::item() const {
  auto& n = req(*this, "item");
  if (n.size() != 1) {
    throw ContractError("item: tensor has " + std::to_string(n.size()) + " elements, expected 1");
  }
  return n.value[0];
}

bool grad_enabled() { return g_grad_enabled; }
GradOff::GradOff() : prev_(g_grad_enabled) { g_grad_enabled = false; }
GradOff::~GradOff() { g_grad_enabled = prev_; }

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
  auto& root = req(loss, "backward");
  if (root.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(root.shape));
  }
  if (!root.backward_fn) {
    throw ContractError("backward: loss has no recorded operations (empty tape)");
  }

  // Gather every recorded ancestor of the loss.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{&root};
  seen.insert(&root);
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // Exact reverse recording order.
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  root.ensure_grad();
  root.grad[0] += 1.0f;
  for (detail::Node* n : order) {
    if (!n->backward_fn) continue;
    if (n->consumed) {
      throw ContractError("backward: graph already consumed; re-record the forward pass");
    }
    n->ensure_grad();
    n->backward_fn(*n);
    n->consumed = true;
  }
}

// ---------------------------------------------------------------------------
// elementwise binary ops

Tensor add(const Tensor& a, const Tensor& b) {
  auto& an = req(a, "add");
  auto& bn = req(b, "add");
  auto bs = binary_shape(an, bn, "add");
  const auto n = numel(bs.out);
  detail::FloatBuf out(static_cast<std::size_t>(n));
  if (bs.b_scalar && !bs.a_scalar) {
    EArr(out.data(), n) = CEArr(an.value.data(), n) + bn.value[0];
  } else if (bs.a_scalar && !bs.b_scalar) {
    EArr(out.data(), n) = an.value[0] + CEArr(bn.value.data(), n);
  } else {
    EArr(out.data(), n) = CEArr(an.value.data(), n) + CEArr(bn.value.data(), n);
  }
  auto grad_to = [n](detail::Node& p, const detail::FloatBuf& g, bool scalar_side) {
    if (!p.requires_grad) return;
    p.ensure_grad();
    if (scalar_side) {
      p.grad[0] += CEArr(g.data(), n).sum();
    } else {
      EArr(p.grad.data(), n) += CEArr(g.data(), n);
    }
  };
  return make_op(bs.out, std::move(out), {a.node_ptr(), b.node_ptr()},
                 [bs, grad_to](detail::Node& self) {
                   grad_to(*self.parents[0], self.grad, bs.a_scalar && !bs.b_scalar);
                   grad_to(*self.parents[1], self.grad, bs.b_scalar && !bs.a_scalar);
                 },
                 "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto& an = req(a, "sub");
  auto& bn = req(b, "sub");
  auto bs = binary_shape(an, bn, "sub");
  const auto n = numel(bs.out);
  detail::FloatBuf out(static_cast<std::size_t>(n));
  if (bs.b_scalar && !bs.a_scalar) {
    EArr(out.data(), n) = CEArr(an.value.data(), n) - bn.value[0];
  } else if (bs.a_scalar && !bs.b_scalar) {
    EArr(out.data(), n) = an.value[0] - CEArr(bn.value.data(), n);
  } else {
    EArr(out.data(), n) = CEArr(an.value.data(), n) - CEArr(bn.value.data(), n);
  }
  return make_op(bs.out, std::move(out), {a.node_ptr(), b.node_ptr()},
                 [bs, n](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     if (bs.a_scalar && !bs.b_scalar) {
                       pa.grad[0] += CEArr(self.grad.data(), n).sum();
                     } else {
                       EArr(pa.grad.data(), n) += CEArr(self.grad.data(), n);
                     }
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     if (bs.b_scalar && !bs.a_scalar) {
                       pb.grad[0] -= CEArr(self.grad.data(), n).sum();
                     } else {
                       EArr(pb.grad.data(), n) -= CEArr(self.grad.data(), n);
                     }
                   }
                 },
                 "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto& an = req(a, "mul");
  auto& bn = req(b, "mul");
  auto bs = binary_shape(an, bn, "mul");
  const auto n = numel(bs.out);
  detail::FloatBuf out(static_cast<std::size_t>(n));
  if (bs.b_scalar && !bs.a_scalar) {
    EArr(out.data(), n) = CEArr(an.value.data(), n) * bn.value[0];
  } else if (bs.a_scalar && !bs.b_scalar) {
    EArr(out.data(), n) = an.value[0] * CEArr(bn.value.data(), n);
  } else {
    EArr(out.data(), n) = CEArr(an.value.data(), n) * CEArr(bn.value.data(), n);
  }
  return make_op(bs.out, std::move(out), {a.node_ptr(), b.node_ptr()},
                 [bs, n](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   const CEArr g(self.grad.data(), n);
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     if (bs.a_scalar && !bs.b_scalar) {
                       pa.grad[0] += (g * CEArr(pb.value.data(), n)).sum();
                     } else if (bs.b_scalar) {
                       EArr(pa.grad.data(), n) += g * pb.value[0];
                     } else {
                       EArr(pa.grad.data(), n) += g * CEArr(pb.value.data(), n);
                     }
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     if (bs.b_scalar && !bs.a_scalar) {
                       pb.grad[0] += (g * CEArr(pa.value.data(), n)).sum();
                     } else if (bs.a_scalar) {
                       EArr(pb.grad.data(), n) += g * pa.value[0];
                     } else {
                       EArr(pb.grad.data(), n) += g * CEArr(pa.value.data(), n);
                     }
                   }
                 },
                 "mul");
}

Tensor add_scalar(const Tensor& a, float s) {
  auto& an = req(a, "add_scalar");
  const auto n = an.size();
  detail::FloatBuf out(static_cast<std::size_t>(n));
  EArr(out.data(), n) = CEArr(an.value.data(), n) + s;
  return make_op(an.shape, std::move(out), {a.node_ptr()},
                 [n](detail::Node& self) {
                   acc_grad(*self.parents[0], self.grad.data(), n);
                 },
                 "add_scalar");
}

Tensor mul_scalar(const Tensor& a, float s) {
  auto& an = req(a, "mul_scalar");
  const auto n = an.size();
  detail::FloatBuf out(static_cast<std::size_t>(n));
  EArr(out.data(), n) = CEArr(an.value.data(), n) * s;
  return make_op(an.shape, std::move(out), {a.node_ptr()},
                 [n, s](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   EArr(p.grad.data(), n) += CEArr(self.grad.data(), n) * s;
                 },
                 "mul_scalar");
}

Tensor div_scalar(const Tensor& a, float s) {
  if (s == 0.0f) throw NumericError("div_scalar: division by zero");
  return mul_scalar(a, 1.0f / s);
}

Tensor relu(const Tensor& a) {
  auto& an = req(a, "relu");
  const auto n = an.size();
  detail::FloatBuf out(static_cast<std::size_t>(n));
  EArr(out.data(), n) = CEArr(an.value.data(), n).max(0.0f);
  return make_op(an.shape, std::move(out), {a.node_ptr()},
                 [n](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   // gradient passes iff input > 0
                   for (std::int64_t i = 0; i < n; ++i) {
                     if (p.value[static_cast<std::size_t>(i)] > 0.0f) {
                       p.grad[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(i)];
                     }
                   }
                 },
                 "relu");
}

Tensor log(const Tensor& a) {
  auto& an = req(a, "log");
  const auto n = an.size();
  detail::FloatBuf out(static_cast<std::size_t>(n));
  EArr(out.data(), n) = CEArr(an.value.data(), n).log();
  return make_op(an.shape, std::move(out), {a.node_ptr()},
                 [n](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   EArr(p.grad.data(), n) +=
                       CEArr(self.grad.data(), n) / CEArr(p.value.data(), n);
                 },
                 "log");
}

Tensor exp(const Tensor& a) {
  auto& an = req(a, "exp");
  const auto n = an.size();
  detail::FloatBuf out(static_cast<std::size_t>(n));
  EArr(out.data(), n) = CEArr(an.value.data(), n).exp();
  return make_op(an.shape, std::move(out), {a.node_ptr()},
                 [n](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   EArr(p.grad.data(), n) +=
                       CEArr(self.grad.data(), n) * CEArr(self.value.data(), n);
                 },
                 "exp");
}

// ---------------------------------------------------------------------------
// softmax family

namespace {

struct DimSplit {
  std::int64_t outer, len, inner;
};

DimSplit split_at(const Shape& shape, int dim, const char* opname) {
  if (dim < 0 || dim >= static_cast<int>(shape.size())) {
    throw DimensionError(std::string(opname) + ": dim " + std::to_string(dim) +
                         " out of range for shape " + shape_str(shape));
  }
  DimSplit s{1, shape[static_cast<std::size_t>(dim)], 1};
  for (int i = 0; i < dim; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(dim) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor softmax(const Tensor& a, int dim) {
  auto& an = req(a, "softmax");
  auto sp = split_at(an.shape, dim, "softmax");
  detail::FloatBuf out(an.value.size());
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.len * sp.inner + in;
      float m = -std::numeric_limits<float>::infinity();
      for (std::int64_t k = 0; k < sp.len; ++k) m = std::max(m, an.value[static_cast<std::size_t>(base + k * sp.inner)]);
      double z = 0.0;
      for (std::int64_t k = 0; k < sp.len; ++k) {
        const auto idx = static_cast<std::size_t>(base + k * sp.inner);
        out[idx] = std::exp(an.value[idx] - m);
        z += out[idx];
      }
      for (std::int64_t k = 0; k < sp.len; ++k) {
        out[static_cast<std::size_t>(base + k * sp.inner)] /= static_cast<float>(z);
      }
    }
  }
  return make_op(an.shape, std::move(out), {a.node_ptr()},
                 [sp](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (std::int64_t o = 0; o < sp.outer; ++o) {
                     for (std::int64_t in = 0; in < sp.inner; ++in) {
                       const std::int64_t base = o * sp.len * sp.inner + in;
                       double dot = 0.0;
                       for (std::int64_t k = 0; k < sp.len; ++k) {
                         const auto idx = static_cast<std::size_t>(base + k * sp.inner);
                         dot += static_cast<double>(self.grad[idx]) * self.value[idx];
                       }
                       for (std::int64_t k = 0; k < sp.len; ++k) {
                         const auto idx = static_cast<std::size_t>(base + k * sp.inner);
                         p.grad[idx] += self.value[idx] * (self.grad[idx] - static_cast<float>(dot));
                       }
                     }
                   }
                 },
                 "softmax");
}

Tensor log_softmax(const Tensor& a, int dim) {
  auto& an = req(a, "log_softmax");
  auto sp = split_at(an.shape, dim, "log_softmax");
  detail::FloatBuf out(an.value.size());
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.len * sp.inner + in;
      float m = -std::numeric_limits<float>::infinity();
      for (std::int64_t k = 0; k < sp.len; ++k) m = std::max(m, an.value[static_cast<std::size_t>(base + k * sp.inner)]);
      double z = 0.0;
      for (std::int64_t k = 0; k < sp.len; ++k) {
        z += std::exp(static_cast<double>(an.value[static_cast<std::size_t>(base + k * sp.inner)]) - m);
      }
      const double lse = m + std::log(z);
      for (std::int64_t k = 0; k < sp.len; ++k) {
        const auto idx = static_cast<std::size_t>(base + k * sp.inner);
        out[idx] = static_cast<float>(an.value[idx] - lse);
      }
    }
  }
  return make_op(an.shape, std::move(out), {a.node_ptr()},
                 [sp](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (std::int64_t o = 0; o < sp.outer; ++o) {
                     for (std::int64_t in = 0; in < sp.inner; ++in) {
                       const std::int64_t base = o * sp.len * sp.inner + in;
                       double gsum = 0.0;
                       for (std::int64_t k = 0; k < sp.len; ++k) {
                         gsum += self.grad[static_cast<std::size_t>(base + k * sp.inner)];
                       }
                       for (std::int64_t k = 0; k < sp.len; ++k) {
                         const auto idx = static_cast<std::size_t>(base + k * sp.inner);
                         p.grad[idx] += self.grad[idx] -
                                        std::exp(self.value[idx]) * static_cast<float>(gsum);
                       }
                     }
                   }
                 },
                 "log_softmax");
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  auto& an = req(a, "sum");
  const auto n = an.size();
  const float total = static_cast<float>(CEArr(an.value.data(), n).cast<double>().sum());
  return make_op({1}, {total}, {a.node_ptr()},
                 [n](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   EArr(p.grad.data(), n) += self.grad[0];
                 },
                 "sum");
}

Tensor mean(const Tensor& a) {
  auto& an = req(a, "mean");
  const auto n = an.size();
  const float m = static_cast<float>(CEArr(an.value.data(), n).cast<double>().sum() / static_cast<double>(n));
  return make_op({1}, {m}, {a.node_ptr()},
                 [n](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   EArr(p.grad.data(), n) += self.grad[0] / static_cast<float>(n);
                 },
                 "mean");
}

Tensor mean_dim0(const Tensor& a) {
  auto& an = req(a, "mean_dim0");
  if (an.shape.size() != 2) {
    throw DimensionError("mean_dim0: expected 2-D input, got " + shape_str(an.shape));
  }
  const std::int64_t rows = an.shape[0], cols = an.shape[1];
  detail::FloatBuf out(static_cast<std::size_t>(cols), 0.0f);
  for (std::int64_t r = 0; r < rows; ++r) {
    EArr(out.data(), cols) += CEArr(an.value.data() + r * cols, cols);
  }
  EArr(out.data(), cols) /= static_cast<float>(rows);
  return make_op({static_cast<int>(cols)}, std::move(out), {a.node_ptr()},
                 [rows, cols](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (std::int64_t r = 0; r < rows; ++r) {
                     EArr(p.grad.data() + r * cols, cols) +=
                         CEArr(self.grad.data(), cols) / static_cast<float>(rows);
                   }
                 },
                 "mean_dim0");
}

// ---------------------------------------------------------------------------
// structural ops

Tensor reshape(const Tensor& a, Shape shape) {
  auto& an = req(a, "reshape");
  if (numel(shape) != an.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(an.shape) + " as " + shape_str(shape));
  }
  const auto n = an.size();
  return make_op(std::move(shape), an.value, {a.node_ptr()},
                 [n](detail::Node& self) {
                   acc_grad(*self.parents[0], self.grad.data(), n);
                 },
                 "reshape");
}

Tensor concat1d(const Tensor& a, const Tensor& b) {
  auto& an = req(a, "concat1d");
  auto& bn = req(b, "concat1d");
  if (an.shape.size() != 1 || bn.shape.size() != 1) {
    throw DimensionError("concat1d: both operands must be 1-D");
  }
  detail::FloatBuf out;
  out.reserve(an.value.size() + bn.value.size());
  out.insert(out.end(), an.value.begin(), an.value.end());
  out.insert(out.end(), bn.value.begin(), bn.value.end());
  const std::int64_t na = an.size(), nb = bn.size();
  return make_op({static_cast<int>(na + nb)}, std::move(out), {a.node_ptr(), b.node_ptr()},
                 [na, nb](detail::Node& self) {
                   acc_grad(*self.parents[0], self.grad.data(), na);
                   acc_grad(*self.parents[1], self.grad.data() + na, nb);
                 },
                 "concat1d");
}

Tensor detach(const Tensor& a) {
  auto& an = req(a, "detach");
  return Tensor::from_data(an.shape, {an.value.begin(), an.value.end()}, false);
}

Tensor take(const Tensor& a, std::int64_t index) {
  auto& an = req(a, "take");
  if (index < 0 || index >= an.size()) {
    throw ContractError("take: index " + std::to_string(index) + " out of range for size " +
                        std::to_string(an.size()));
  }
  return make_op({1}, {an.value[static_cast<std::size_t>(index)]}, {a.node_ptr()},
                 [index](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   p.grad[static_cast<std::size_t>(index)] += self.grad[0];
                 },
                 "take");
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto& an = req(a, "matmul");
  auto& bn = req(b, "matmul");
  if (an.shape.size() != 2 || bn.shape.size() != 2) {
    throw DimensionError("matmul: operands must be 2-D, got " + shape_str(an.shape) + " and " +
                         shape_str(bn.shape));
  }
  const std::int64_t m = an.shape[0], k = an.shape[1], k2 = bn.shape[0], n = bn.shape[1];
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(an.shape) + " vs " +
                         shape_str(bn.shape));
  }
  detail::FloatBuf out(static_cast<std::size_t>(m * n));
  MapMat(out.data(), m, n).noalias() =
      CMapMat(an.value.data(), m, k) * CMapMat(bn.value.data(), k, n);
  return make_op({static_cast<int>(m), static_cast<int>(n)}, std::move(out),
                 {a.node_ptr(), b.node_ptr()},
                 [m, k, n](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   const CMapMat g(self.grad.data(), m, n);
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     MapMat(pa.grad.data(), m, k).noalias() +=
                         g * CMapMat(pb.value.data(), k, n).transpose();
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     MapMat(pb.grad.data(), k, n).noalias() +=
                         CMapMat(pa.value.data(), m, k).transpose() * g;
                   }
                 },
                 "matmul");
}

namespace {

struct ConvDims {
  std::int64_t N, C, H, W, F, kh, kw, OH, OW, stride, pad;
  std::int64_t ckk() const { return C * kh * kw; }
  std::int64_t ohow() const { return OH * OW; }
};

void im2col(const float* x, const ConvDims& d, RowMat& cols) {
  cols.setZero(d.ckk(), d.N * d.ohow());
  for (std::int64_t n = 0; n < d.N; ++n) {
    const std::int64_t col0 = n * d.ohow();
    for (std::int64_t c = 0; c < d.C; ++c) {
      const float* plane = x + (n * d.C + c) * d.H * d.W;
      for (std::int64_t ki = 0; ki < d.kh; ++ki) {
        for (std::int64_t kj = 0; kj < d.kw; ++kj) {
          const std::int64_t row = (c * d.kh + ki) * d.kw + kj;
          float* dst = cols.data() + row * cols.cols() + col0;
          for (std::int64_t oh = 0; oh < d.OH; ++oh) {
            const std::int64_t ih = oh * d.stride - d.pad + ki;
            if (ih < 0 || ih >= d.H) continue;
            for (std::int64_t ow = 0; ow < d.OW; ++ow) {
              const std::int64_t iw = ow * d.stride - d.pad + kj;
              if (iw < 0 || iw >= d.W) continue;
              dst[oh * d.OW + ow] = plane[ih * d.W + iw];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const RowMat& dcols, const ConvDims& d, float* dx) {
  for (std::int64_t n = 0; n < d.N; ++n) {
    const std::int64_t col0 = n * d.ohow();
    for (std::int64_t c = 0; c < d.C; ++c) {
      float* plane = dx + (n * d.C + c) * d.H * d.W;
      for (std::int64_t ki = 0; ki < d.kh; ++ki) {
        for (std::int64_t kj = 0; kj < d.kw; ++kj) {
          const std::int64_t row = (c * d.kh + ki) * d.kw + kj;
          const float* src = dcols.data() + row * dcols.cols() + col0;
          for (std::int64_t oh = 0; oh < d.OH; ++oh) {
            const std::int64_t ih = oh * d.stride - d.pad + ki;
            if (ih < 0 || ih >= d.H) continue;
            for (std::int64_t ow = 0; ow < d.OW; ++ow) {
              const std::int64_t iw = ow * d.stride - d.pad + kj;
              if (iw < 0 || iw >= d.W) continue;
              plane[ih * d.W + iw] += src[oh * d.OW + ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  auto& xn = req(x, "conv2d");
  auto& wn = req(w, "conv2d");
  if (xn.shape.size() != 4 || wn.shape.size() != 4) {
    throw DimensionError("conv2d: expected 4-D input and kernel, got " + shape_str(xn.shape) +
                         " and " + shape_str(wn.shape));
  }
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (pad < 0) throw ContractError("conv2d: pad must be >= 0");
  ConvDims d{};
  d.N = xn.shape[0]; d.C = xn.shape[1]; d.H = xn.shape[2]; d.W = xn.shape[3];
  d.F = wn.shape[0]; d.kh = wn.shape[2]; d.kw = wn.shape[3];
  d.stride = stride; d.pad = pad;
  if (wn.shape[1] != d.C) {
    throw DimensionError("conv2d: input has " + std::to_string(d.C) + " channels but kernel expects " +
                         std::to_string(wn.shape[1]));
  }
  if (d.kh > d.H + 2 * pad || d.kw > d.W + 2 * pad) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
  d.OW = (d.W + 2 * pad - d.kw) / stride + 1;

  auto cols = std::make_shared<RowMat>();
  im2col(xn.value.data(), d, *cols);
  RowMat outmat(d.F, d.N * d.ohow());
  outmat.noalias() = CMapMat(wn.value.data(), d.F, d.ckk()) * (*cols);

  // outmat columns are (n, oh, ow); reorder to N,F,OH,OW layout.
  detail::FloatBuf out(static_cast<std::size_t>(d.N * d.F * d.ohow()));
  for (std::int64_t n = 0; n < d.N; ++n) {
    for (std::int64_t f = 0; f < d.F; ++f) {
      std::memcpy(out.data() + (n * d.F + f) * d.ohow(),
                  outmat.data() + f * outmat.cols() + n * d.ohow(),
                  static_cast<std::size_t>(d.ohow()) * sizeof(float));
    }
  }
  Shape oshape{static_cast<int>(d.N), static_cast<int>(d.F), static_cast<int>(d.OH), static_cast<int>(d.OW)};
  return make_op(std::move(oshape), std::move(out), {x.node_ptr(), w.node_ptr()},
                 [d, cols](detail::Node& self) {
                   auto& px = *self.parents[0];
                   auto& pw = *self.parents[1];
                   RowMat gmat(d.F, d.N * d.ohow());
                   for (std::int64_t n = 0; n < d.N; ++n) {
                     for (std::int64_t f = 0; f < d.F; ++f) {
                       std::memcpy(gmat.data() + f * gmat.cols() + n * d.ohow(),
                                   self.grad.data() + (n * d.F + f) * d.ohow(),
                                   static_cast<std::size_t>(d.ohow()) * sizeof(float));
                     }
                   }
                   if (pw.requires_grad) {
                     pw.ensure_grad();
                     MapMat(pw.grad.data(), d.F, d.ckk()).noalias() += gmat * cols->transpose();
                   }
                   if (px.requires_grad) {
                     px.ensure_grad();
                     RowMat dcols(d.ckk(), d.N * d.ohow());
                     dcols.noalias() = CMapMat(pw.value.data(), d.F, d.ckk()).transpose() * gmat;
                     col2im_add(dcols, d, px.grad.data());
                   }
                 },
                 "conv2d");
}

Tensor bias_add_nchw(const Tensor& x, const Tensor& b) {
  auto& xn = req(x, "bias_add_nchw");
  auto& bn = req(b, "bias_add_nchw");
  if (xn.shape.size() != 4 || bn.shape.size() != 1 || bn.shape[0] != xn.shape[1]) {
    throw DimensionError("bias_add_nchw: input " + shape_str(xn.shape) + " incompatible with bias " +
                         shape_str(bn.shape));
  }
  const std::int64_t N = xn.shape[0], C = xn.shape[1], HW = static_cast<std::int64_t>(xn.shape[2]) * xn.shape[3];
  detail::FloatBuf out(xn.value.size());
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const std::int64_t off = (n * C + c) * HW;
      EArr(out.data() + off, HW) = CEArr(xn.value.data() + off, HW) + bn.value[static_cast<std::size_t>(c)];
    }
  }
  return make_op(xn.shape, std::move(out), {x.node_ptr(), b.node_ptr()},
                 [N, C, HW](detail::Node& self) {
                   auto& px = *self.parents[0];
                   auto& pb = *self.parents[1];
                   if (px.requires_grad) {
                     px.ensure_grad();
                     EArr(px.grad.data(), static_cast<std::int64_t>(px.grad.size())) +=
                         CEArr(self.grad.data(), static_cast<std::int64_t>(self.grad.size()));
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     for (std::int64_t n = 0; n < N; ++n) {
                       for (std::int64_t c = 0; c < C; ++c) {
                         pb.grad[static_cast<std::size_t>(c)] +=
                             CEArr(self.grad.data() + (n * C + c) * HW, HW).sum();
                       }
                     }
                   }
                 },
                 "bias_add_nchw");
}

Tensor bias_add_cols(const Tensor& x, const Tensor& b) {
  auto& xn = req(x, "bias_add_cols");
  auto& bn = req(b, "bias_add_cols");
  if (xn.shape.size() != 2 || bn.shape.size() != 1 || bn.shape[0] != xn.shape[1]) {
    throw DimensionError("bias_add_cols: input " + shape_str(xn.shape) + " incompatible with bias " +
                         shape_str(bn.shape));
  }
  const std::int64_t N = xn.shape[0], F = xn.shape[1];
  detail::FloatBuf out(xn.value.size());
  for (std::int64_t n = 0; n < N; ++n) {
    EArr(out.data() + n * F, F) = CEArr(xn.value.data() + n * F, F) + CEArr(bn.value.data(), F);
  }
  return make_op(xn.shape, std::move(out), {x.node_ptr(), b.node_ptr()},
                 [N, F](detail::Node& self) {
                   auto& px = *self.parents[0];
                   auto& pb = *self.parents[1];
                   if (px.requires_grad) {
                     px.ensure_grad();
                     EArr(px.grad.data(), N * F) += CEArr(self.grad.data(), N * F);
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     for (std::int64_t n = 0; n < N; ++n) {
                       EArr(pb.grad.data(), F) += CEArr(self.grad.data() + n * F, F);
                     }
                   }
                 },
                 "bias_add_cols");
}

Tensor global_avg_pool(const Tensor& x) {
  auto& xn = req(x, "global_avg_pool");
  if (xn.shape.size() != 4) {
    throw DimensionError("global_avg_pool: expected 4-D input, got " + shape_str(xn.shape));
  }
  const std::int64_t N = xn.shape[0], C = xn.shape[1], HW = static_cast<std::int64_t>(xn.shape[2]) * xn.shape[3];
  detail::FloatBuf out(static_cast<std::size_t>(N * C));
  for (std::int64_t i = 0; i < N * C; ++i) {
    out[static_cast<std::size_t>(i)] = CEArr(xn.value.data() + i * HW, HW).sum() / static_cast<float>(HW);
  }
  return make_op({static_cast<int>(N), static_cast<int>(C)}, std::move(out), {x.node_ptr()},
                 [N, C, HW](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (std::int64_t i = 0; i < N * C; ++i) {
                     EArr(p.grad.data() + i * HW, HW) +=
                         self.grad[static_cast<std::size_t>(i)] / static_cast<float>(HW);
                   }
                 },
                 "global_avg_pool");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  auto& ln = req(logits, "cross_entropy");
  if (ln.shape.size() != 2) {
    throw DimensionError("cross_entropy: logits must be 2-D, got " + shape_str(ln.shape));
  }
  const std::int64_t N = ln.shape[0], K = ln.shape[1];
  if (static_cast<std::int64_t>(labels.size()) != N) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(N) + " rows");
  }
  std::vector<int> y(labels.begin(), labels.end());
  double total = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    if (y[static_cast<std::size_t>(n)] < 0 || y[static_cast<std::size_t>(n)] >= K) {
      throw ContractError("cross_entropy: label out of range");
    }
    const float* row = ln.value.data() + n * K;
    float m = row[0];
    for (std::int64_t k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0.0;
    for (std::int64_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k]) - m);
    total += (m + std::log(z)) - row[y[static_cast<std::size_t>(n)]];
  }
  const float loss = static_cast<float>(total / static_cast<double>(N));
  return make_op({1}, {loss}, {logits.node_ptr()},
                 [N, K, y = std::move(y)](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   const float g = self.grad[0] / static_cast<float>(N);
                   for (std::int64_t n = 0; n < N; ++n) {
                     const float* row = p.value.data() + n * K;
                     float* grow = p.grad.data() + n * K;
                     float m = row[0];
                     for (std::int64_t k = 1; k < K; ++k) m = std::max(m, row[k]);
                     double z = 0.0;
                     for (std::int64_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k]) - m);
                     for (std::int64_t k = 0; k < K; ++k) {
                       const float pk = static_cast<float>(std::exp(static_cast<double>(row[k]) - m) / z);
                       const float onehot = (k == y[static_cast<std::size_t>(n)]) ? 1.0f : 0.0f;
                       grow[k] += g * (pk - onehot);
                     }
                   }
                 },
                 "cross_entropy");
}

Tensor unary_with_mask(const Tensor& in, detail::FloatBuf value,
                       detail::FloatBuf pass_mask, const char* opname) {
  auto& an = req(in, opname);
  if (static_cast<std::int64_t>(value.size()) != an.size() ||
      static_cast<std::int64_t>(pass_mask.size()) != an.size()) {
    throw DimensionError(std::string(opname) + ": value/mask size mismatch");
  }
  const auto n = an.size();
  return make_op(an.shape, std::move(value), {in.node_ptr()},
                 [n, mask = std::move(pass_mask)](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   EArr(p.grad.data(), n) +=
                       CEArr(self.grad.data(), n) * CEArr(mask.data(), n);
                 },
                 opname);
}

Tensor normal_tensor(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
  auto n = numel(shape);
  std::vector<float> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor::from_data(shape, std::move(data), requires_grad);
}

Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad) {
  auto n = numel(shape);
  std::vector<float> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = static_cast<float>(rng.uniform(lo, hi));
  return Tensor::from_data(shape, std::move(data), requires_grad);
}

}  // namespace dqmq
