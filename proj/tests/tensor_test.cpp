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

#include <cmath>
#include <vector>

#include "doctest.h"
#include "dqmq/tensor.hpp"
#include "helpers.hpp"

using namespace dqmq;
using dqmq::testing::grad_check;

namespace {

Tensor leaf(Shape shape, std::uint32_t seed, float lo = -2.0f, float hi = 2.0f) {
  auto vals = testing::random_values(static_cast<std::size_t>(numel(shape)), seed, lo, hi);
  return Tensor::from_data(std::move(shape), std::move(vals), true);
}

}  // namespace

TEST_CASE("construction and shape bookkeeping") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.size() == 6);
  CHECK(z.ndim() == 2);
  CHECK(z.dim(1) == 3);
  for (float v : z.data()) CHECK(v == 0.0f);

  Tensor s = Tensor::scalar(4.25f);
  CHECK(s.item() == doctest::Approx(4.25));

  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0f, 2.0f, 3.0f}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({2, -1}), ContractError);
}

TEST_CASE("item requires a single element") {
  Tensor t = Tensor::from_data({2}, {1.0f, 2.0f});
  CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("elementwise arithmetic values") {
  Tensor a = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f});
  Tensor b = Tensor::from_data({3}, {4.0f, 3.0f, -1.0f});
  CHECK(add(a, b).data()[1] == doctest::Approx(1.0));
  CHECK(sub(a, b).data()[0] == doctest::Approx(-3.0));
  CHECK(mul(a, b).data()[2] == doctest::Approx(-0.5));
  CHECK(mul_scalar(a, 2.0f).data()[1] == doctest::Approx(-4.0));
  CHECK(add_scalar(a, 1.0f).data()[2] == doctest::Approx(1.5));
  CHECK(div_scalar(b, 2.0f).data()[0] == doctest::Approx(2.0));

  Tensor bad = Tensor::from_data({2}, {1.0f, 1.0f});
  CHECK_THROWS_AS(add(a, bad), DimensionError);
  CHECK_THROWS_AS(div_scalar(a, 0.0f), NumericError);
}

TEST_CASE("softmax rows sum to one and shift invariance holds") {
  Tensor x = Tensor::from_data({2, 3}, {1.0f, 2.0f, 3.0f, -1.0f, 0.0f, 1.0f});
  Tensor p = softmax(x, 1);
  CHECK(p.data()[0] + p.data()[1] + p.data()[2] == doctest::Approx(1.0));
  CHECK(p.data()[3] + p.data()[4] + p.data()[5] == doctest::Approx(1.0));

  Tensor shifted = softmax(add_scalar(x, 100.0f), 1);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(shifted.data()[i] == doctest::Approx(p.data()[i]).epsilon(1e-4));
  }
}

TEST_CASE("log_softmax agrees with log of softmax") {
  Tensor x = Tensor::from_data({1, 4}, {0.3f, -1.2f, 2.0f, 0.0f});
  Tensor a = log_softmax(x, 1);
  Tensor b = log(softmax(x, 1));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-4));
  }
}

TEST_CASE("cross entropy of uniform logits is log k") {
  Tensor logits = Tensor::zeros({4, 10});
  std::vector<int> labels{0, 3, 7, 9};
  CHECK(cross_entropy(logits, labels).item() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-5));

  std::vector<int> bad{0, 3, 7, 10};
  CHECK_THROWS_AS(cross_entropy(logits, bad), ContractError);
}

TEST_CASE("backward accumulates into leaves") {
  Tensor a = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  Tensor b = Tensor::from_data({2}, {3.0f, 4.0f}, true);
  Tensor loss = sum(mul(a, b));
  backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(3.0));
  CHECK(a.grad()[1] == doctest::Approx(4.0));
  CHECK(b.grad()[0] == doctest::Approx(1.0));
  CHECK(b.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar roots and empty tapes") {
  Tensor a = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  CHECK_THROWS_AS(backward(mul_scalar(a, 2.0f)), ContractError);
  Tensor lone = Tensor::scalar(1.0f, true);
  CHECK_THROWS_AS(backward(lone), ContractError);
}

TEST_CASE("a consumed graph refuses a second backward") {
  Tensor a = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  Tensor loss = sum(mul(a, a));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), ContractError);
}

TEST_CASE("shared subexpression receives both contributions") {
  // loss = sum(a*a) + sum(a), so d/da = 2a + 1.
  Tensor a = Tensor::from_data({2}, {1.5f, -0.5f}, true);
  Tensor loss = add(sum(mul(a, a)), sum(a));
  backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(4.0));
  CHECK(a.grad()[1] == doctest::Approx(0.0));
}

TEST_CASE("detach blocks gradient flow but keeps values") {
  Tensor a = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  Tensor d = detach(mul_scalar(a, 3.0f));
  CHECK(d.data()[1] == doctest::Approx(6.0));
  CHECK_FALSE(d.requires_grad());

  Tensor loss = add(sum(mul(a, a)), sum(d));
  backward(loss);
  // Only the quadratic path contributes.
  CHECK(a.grad()[0] == doctest::Approx(2.0));
  CHECK(a.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("GradOff suppresses tape recording") {
  Tensor a = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  {
    GradOff off;
    Tensor y = sum(mul(a, a));
    CHECK_FALSE(y.requires_grad());
    CHECK_THROWS_AS(backward(y), ContractError);
  }
  // Recording resumes once the guard is gone.
  Tensor y = sum(mul(a, a));
  backward(y);
  CHECK(a.has_grad());
}

TEST_CASE("elementwise gradients match finite differences") {
  Tensor x = leaf({6}, 11);
  auto res = grad_check([&] { return sum(mul(x, x)); }, x);
  CHECK(res.max_rel < 1e-3);

  Tensor y = leaf({6}, 12, 0.2f, 2.0f);
  res = grad_check([&] { return sum(log(y)); }, y);
  CHECK(res.max_rel < 1e-3);

  Tensor z = leaf({6}, 13, -1.0f, 1.0f);
  res = grad_check([&] { return sum(exp(z)); }, z);
  CHECK(res.max_rel < 1e-3);
}

TEST_CASE("relu gradient away from the kink") {
  // Values are kept clear of zero so the finite difference is well posed.
  Tensor x = Tensor::from_data({4}, {-1.5f, -0.3f, 0.4f, 2.0f}, true);
  auto res = grad_check([&] { return sum(mul(relu(x), relu(x))); }, x, 1e-3);
  CHECK(res.max_rel < 1e-3);
}

TEST_CASE("matmul values and gradients") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12}, true);
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.data()[0] == doctest::Approx(58.0));
  CHECK(c.data()[3] == doctest::Approx(154.0));

  auto ra = grad_check([&] { return sum(mul(matmul(a, b), matmul(a, b))); }, a);
  CHECK(ra.max_rel < 1e-3);
  auto rb = grad_check([&] { return sum(mul(matmul(a, b), matmul(a, b))); }, b);
  CHECK(rb.max_rel < 1e-3);

  Tensor bad = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, bad), DimensionError);
}

TEST_CASE("conv2d matches a hand-rolled 3x3 correlation") {
  // Single channel, single output channel, stride 1, pad 1.
  Tensor x = Tensor::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}, false);
  std::vector<float> wv(9, 0.0f);
  wv[4] = 1.0f;  // identity kernel
  Tensor w = Tensor::from_data({1, 1, 3, 3}, wv, false);
  Tensor y = conv2d(x, w, 1, 1);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

  // Shifting the tap left by one column shifts the image right.
  std::vector<float> wshift(9, 0.0f);
  wshift[3] = 1.0f;
  Tensor w2 = Tensor::from_data({1, 1, 3, 3}, wshift, false);
  Tensor y2 = conv2d(x, w2, 1, 1);
  CHECK(y2.data()[1] == doctest::Approx(1.0));
  CHECK(y2.data()[0] == doctest::Approx(0.0));
}

TEST_CASE("conv2d gradients match finite differences") {
  // Positive ranges keep every gradient coordinate well away from zero,
  // which the float32 finite difference needs at this tolerance.
  Tensor x = leaf({2, 2, 4, 4}, 21, 0.2f, 1.0f);
  Tensor w = leaf({3, 2, 3, 3}, 22, 0.1f, 0.5f);
  auto make = [&] {
    Tensor y = conv2d(x, w, 2, 1);
    return sum(mul(y, y));
  };
  CHECK(grad_check(make, x, 2e-2).max_rel < 1e-3);
  CHECK(grad_check(make, w, 2e-2).max_rel < 1e-3);
}

TEST_CASE("conv2d rejects mismatched channels") {
  Tensor x = Tensor::zeros({1, 3, 4, 4});
  Tensor w = Tensor::zeros({2, 4, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, 1, 1), DimensionError);
}

TEST_CASE("bias and pooling gradients") {
  Tensor x = leaf({2, 3, 2, 2}, 31, -1.0f, 1.0f);
  Tensor b = leaf({3}, 32, -0.5f, 0.5f);
  auto make = [&] {
    Tensor y = global_avg_pool(bias_add_nchw(x, b));
    return sum(mul(y, y));
  };
  CHECK(grad_check(make, x).max_rel < 1e-3);
  CHECK(grad_check(make, b).max_rel < 1e-3);

  // Pooling averages each channel plane.
  Tensor p = global_avg_pool(Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
  CHECK(p.shape() == Shape{1, 2});
  CHECK(p.data()[0] == doctest::Approx(2.5));
  CHECK(p.data()[1] == doctest::Approx(6.5));
}

TEST_CASE("softmax and cross entropy gradients match finite differences") {
  Tensor x = leaf({3, 4}, 41);
  std::vector<int> labels{1, 0, 3};
  auto make = [&] { return cross_entropy(x, labels); };
  CHECK(grad_check(make, x, 2e-3).max_rel < 1e-3);

  Tensor y = leaf({2, 3}, 42);
  auto make2 = [&] {
    Tensor p = softmax(y, 1);
    return sum(mul(p, p));
  };
  CHECK(grad_check(make2, y, 2e-3).max_rel < 1e-3);
}

TEST_CASE("reshape, concat and take") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor r = reshape(a, {3, 2});
  CHECK(r.shape() == Shape{3, 2});
  CHECK(r.data()[4] == doctest::Approx(5.0));
  CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);

  Tensor b = Tensor::from_data({2}, {7.0f, 8.0f}, true);
  Tensor c = concat1d(reshape(a, {6}), b);
  CHECK(c.size() == 8);
  CHECK(c.data()[6] == doctest::Approx(7.0));

  Tensor t = take(c, 7);
  CHECK(t.item() == doctest::Approx(8.0));
  CHECK_THROWS_AS(take(c, 8), ContractError);

  backward(mul_scalar(t, 3.0f));
  CHECK(b.grad()[1] == doctest::Approx(3.0));
  CHECK(b.grad()[0] == doctest::Approx(0.0));
}

TEST_CASE("mean_dim0 averages rows and routes gradient evenly") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 5, 6, 7}, true);
  Tensor m = mean_dim0(a);
  CHECK(m.shape() == Shape{3});
  CHECK(m.data()[0] == doctest::Approx(3.0));
  backward(sum(m));
  for (float g : a.grad()) CHECK(g == doctest::Approx(0.5));
}

TEST_CASE("rng tensors are deterministic per seed") {
  Rng r1(99), r2(99), r3(100);
  Tensor a = normal_tensor({32}, r1);
  Tensor b = normal_tensor({32}, r2);
  Tensor c = normal_tensor({32}, r3);
  bool same = true, diff = false;
  for (std::size_t i = 0; i < 32; ++i) {
    same = same && a.data()[i] == b.data()[i];
    diff = diff || a.data()[i] != c.data()[i];
  }
  CHECK(same);
  CHECK(diff);
}
