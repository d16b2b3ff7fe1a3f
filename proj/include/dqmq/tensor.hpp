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

#ifndef DQMQ_TENSOR_HPP_
#define DQMQ_TENSOR_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "dqmq/errors.hpp"
#include "dqmq/rng.hpp"

namespace dqmq {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// Allocator with a fixed 64-byte alignment. Heap alignment from plain
/// malloc varies between allocations, and vectorized reductions round
/// differently depending on where the SIMD-width boundary falls inside a
/// buffer. Pinning the alignment to the widest vector register keeps float
/// summation order, and therefore results, bitwise identical across runs.
template <typename T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAlloc() = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlign}));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t{kAlign});
  }

  template <typename U>
  bool operator==(const AlignedAlloc<U>&) const noexcept { return true; }
  template <typename U>
  bool operator!=(const AlignedAlloc<U>&) const noexcept { return false; }
};

using FloatBuf = std::vector<float, AlignedAlloc<float>>;

/// One recorded value in the computation graph. Nodes carry a process-wide
/// creation sequence number; backward replays recorded ops in exact reverse
/// creation order.
struct Node {
  Shape shape;
  FloatBuf value;
  FloatBuf grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool consumed = false;  // backward already ran through this op
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // null for leaves

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
  }
};

}  // namespace detail

/// Dense float32 tensor with optional participation in reverse-mode autodiff.
///
/// Values are immutable through library operations; the only sanctioned
/// mutations are gradient accumulation and explicit writes through
/// mutable_data() (optimizer updates, parameter perturbation).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(shape().size()); }
  std::int64_t size() const;

  std::span<const float> data() const;
  /// Direct write access to the value buffer. Reserved for optimizer steps
  /// and parameter perturbation on leaf tensors.
  std::span<float> mutable_data();

  bool requires_grad() const;
  void set_requires_grad(bool v);

  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  /// Value of a single-element tensor.
  float item() const;

  detail::Node* node() const { return n_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return n_; }

  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> n_;
};

/// Thread-local switch: when off, ops do not record backward rules.
bool grad_enabled();
class GradOff {
 public:
  GradOff();
  ~GradOff();
  GradOff(const GradOff&) = delete;
  GradOff& operator=(const GradOff&) = delete;

 private:
  bool prev_;
};

/// Runs reverse-mode accumulation from a scalar loss. Gradients accumulate
/// additively into every requires_grad tensor reachable from the loss.
/// Replaying the same recorded graph twice is an error.
void backward(const Tensor& loss);

// Elementwise and reduction ops. Binary ops accept identical shapes or a
// single-element tensor on either side (scalar broadcast); no other
// broadcasting exists.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor div_scalar(const Tensor& a, float s);
Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor softmax(const Tensor& a, int dim);
Tensor log_softmax(const Tensor& a, int dim);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_dim0(const Tensor& a);  // [N,F] -> [F]

// Structural ops.
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat1d(const Tensor& a, const Tensor& b);
Tensor take(const Tensor& a, std::int64_t index);  // scalar output
Tensor detach(const Tensor& a);  // same values, cut from the tape

// Linear-algebra ops (Eigen-backed).
Tensor matmul(const Tensor& a, const Tensor& b);
/// Cross-correlation (no kernel flip). x: [N,C,H,W], w: [F,C,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor bias_add_nchw(const Tensor& x, const Tensor& b);
Tensor bias_add_cols(const Tensor& x, const Tensor& b);
Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C]

/// Mean softmax cross-entropy over rows of [N,K] logits.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Builds a unary op with a caller-supplied forward value and an elementwise
/// multiplicative gradient mask (the straight-through estimator hook).
Tensor unary_with_mask(const Tensor& in, detail::FloatBuf value,
                       detail::FloatBuf pass_mask, const char* opname);

// Random tensor construction.
Tensor normal_tensor(const Shape& shape, Rng& rng, double stddev = 1.0,
                     bool requires_grad = false);
Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo, double hi,
                      bool requires_grad = false);

}  // namespace dqmq

#endif  // DQMQ_TENSOR_HPP_
