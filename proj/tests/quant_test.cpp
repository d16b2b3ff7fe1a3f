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
#include "dqmq/quant.hpp"
#include "dqmq/tensor.hpp"
#include "helpers.hpp"

using namespace dqmq;

TEST_CASE("affine calibration of [-1,1] gives the textbook 8-bit grid") {
  std::vector<float> v{-1.0f, -0.25f, 0.0f, 0.5f, 1.0f};
  QuantParams p = calibrate(v, 8, QuantMode::affine);
  CHECK(p.scale == doctest::Approx(2.0 / 255.0).epsilon(1e-9));
  CHECK(p.zero_point == doctest::Approx(128.0));
  CHECK(p.qmin() == 0.0);
  CHECK(p.qmax() == 255.0);
}

TEST_CASE("symmetric calibration centers the grid at zero") {
  std::vector<float> v{-0.4f, 0.1f, 0.8f};
  QuantParams p = calibrate(v, 8, QuantMode::symmetric);
  CHECK(p.zero_point == 0.0);
  CHECK(p.scale == doctest::Approx(0.8 / 127.0));
  CHECK(p.qmin() == -127.0);
  CHECK(p.qmax() == 127.0);
}

TEST_CASE("calibrate rejects empty and non-finite inputs") {
  std::vector<float> empty;
  CHECK_THROWS_AS(calibrate(empty, 8, QuantMode::affine), ContractError);
  std::vector<float> nan{1.0f, std::nanf("")};
  CHECK_THROWS_AS(calibrate(nan, 8, QuantMode::affine), ContractError);
  std::vector<float> ok{1.0f};
  CHECK_THROWS_AS(calibrate(ok, 0, QuantMode::affine), ContractError);
  CHECK_THROWS_AS(calibrate(ok, 33, QuantMode::affine), ContractError);
}

TEST_CASE("round-trip error is bounded by half a step for in-range values") {
  for (QuantMode mode : {QuantMode::affine, QuantMode::symmetric}) {
    for (int bits : {2, 3, 4, 8}) {
      auto vals = testing::random_values(2000, 777u + static_cast<unsigned>(bits));
      QuantParams p = calibrate(vals, bits, mode);
      Tensor t = Tensor::from_data({static_cast<int>(vals.size())}, vals);
      Tensor rt = dequantize(quantize(t, p), p);
      for (std::size_t i = 0; i < vals.size(); ++i) {
        CHECK(std::abs(rt.data()[i] - vals[i]) <= p.scale * 0.5 + 1e-6);
      }
    }
  }
}

TEST_CASE("round-trip is monotone") {
  auto vals = testing::random_values(500, 909);
  QuantParams p = calibrate(vals, 3, QuantMode::affine);
  std::sort(vals.begin(), vals.end());
  Tensor t = Tensor::from_data({static_cast<int>(vals.size())}, vals);
  Tensor rt = dequantize(quantize(t, p), p);
  for (std::size_t i = 1; i < vals.size(); ++i) {
    CHECK(rt.data()[i] >= rt.data()[i - 1]);
  }
}

TEST_CASE("a constant tensor round-trips exactly in both modes") {
  for (QuantMode mode : {QuantMode::affine, QuantMode::symmetric}) {
    Tensor t = Tensor::full({5}, 0.7f);
    QuantParams p = calibrate(t, 4, mode);
    Tensor rt = dequantize(quantize(t, p), p);
    for (float v : rt.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-7));
  }
}

TEST_CASE("quantized outputs live on the integer grid") {
  auto vals = testing::random_values(300, 1234);
  QuantParams p = calibrate(vals, 4, QuantMode::affine);
  Tensor q = quantize(Tensor::from_data({300}, vals), p);
  for (float v : q.data()) {
    CHECK(v == doctest::Approx(std::round(v)));
    CHECK(v >= p.qmin());
    CHECK(v <= p.qmax());
  }
}

TEST_CASE("dequantize rejects off-grid and out-of-range codes") {
  QuantParams p;
  p.bits = 4;
  p.mode = QuantMode::affine;
  p.scale = 0.1;
  p.zero_point = 7.0;
  CHECK_THROWS_AS(dequantize(Tensor::from_data({1}, {3.5f}), p), ContractError);
  CHECK_THROWS_AS(dequantize(Tensor::from_data({1}, {16.0f}), p), ContractError);
  CHECK_THROWS_AS(dequantize(Tensor::from_data({1}, {-1.0f}), p), ContractError);
  Tensor ok = dequantize(Tensor::from_data({1}, {15.0f}), p);
  CHECK(ok.data()[0] == doctest::Approx(0.8));
}

TEST_CASE("validate rejects inconsistent parameters") {
  QuantParams p;
  p.bits = 8;
  p.mode = QuantMode::symmetric;
  p.scale = 0.0;
  CHECK_THROWS_AS(p.validate(), ContractError);
  p.scale = 0.1;
  p.zero_point = 1.0;
  CHECK_THROWS_AS(p.validate(), ContractError);
}

TEST_CASE("exact mode is the identity to float precision") {
  auto vals = testing::random_values(1000, 555);
  Tensor t = Tensor::from_data({1000}, vals);
  for (QuantMode mode : {QuantMode::affine, QuantMode::symmetric}) {
    Tensor y = fake_quant_bits(t, 8, mode, /*exact=*/true);
    for (std::size_t i = 0; i < vals.size(); ++i) {
      CHECK(std::abs(y.data()[i] - vals[i]) <=
            1e-6 * std::max(1.0f, std::abs(vals[i])));
    }
  }
}

TEST_CASE("fake quant equals dequantize of quantize") {
  auto vals = testing::random_values(400, 31);
  Tensor t = Tensor::from_data({400}, vals);
  QuantParams p = calibrate(t, 4, QuantMode::affine);
  Tensor a = fake_quant(t, p);
  Tensor b = dequantize(quantize(t, p), p);
  for (std::size_t i = 0; i < vals.size(); ++i) {
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-7));
  }
}

TEST_CASE("straight-through gradient passes in range and clips outside") {
  // Calibration range comes from the tensor itself, so append sentinels and
  // quantize with parameters fitted to a narrower window.
  std::vector<float> vals{-0.9f, -0.2f, 0.3f, 0.8f};
  QuantParams p;
  p.bits = 4;
  p.mode = QuantMode::symmetric;
  p.scale = 0.5 / p.qmax();  // representable range [-0.5, 0.5]
  Tensor x = Tensor::from_data({4}, vals, true);
  Tensor y = fake_quant(x, p);
  backward(sum(y));
  CHECK(x.grad()[0] == 0.0f);  // below range
  CHECK(x.grad()[1] == 1.0f);
  CHECK(x.grad()[2] == 1.0f);
  CHECK(x.grad()[3] == 0.0f);  // above range
}

TEST_CASE("one-bit symmetric collapses to zero, affine keeps two levels") {
  std::vector<float> vals{-1.0f, -0.3f, 0.2f, 1.0f};
  Tensor t = Tensor::from_data({4}, vals);
  Tensor sym = fake_quant_bits(t, 1, QuantMode::symmetric);
  for (float v : sym.data()) CHECK(v == 0.0f);

  // Asymmetric data keeps the affine 1-bit grid's two levels distinct.
  Tensor t2 = Tensor::from_data({2}, {-3.0f, 1.0f});
  Tensor aff = fake_quant_bits(t2, 1, QuantMode::affine);
  CHECK(aff.data()[0] == doctest::Approx(-4.0));
  CHECK(aff.data()[1] == doctest::Approx(0.0));
}

TEST_CASE("bit width zero prunes values and gradient") {
  Tensor x = Tensor::from_data({3}, {0.5f, -1.0f, 2.0f}, true);
  Tensor y = fake_quant_bits(x, 0, QuantMode::symmetric);
  for (float v : y.data()) CHECK(v == 0.0f);
  backward(sum(y));
  for (float g : x.grad()) CHECK(g == 0.0f);
}

TEST_CASE("more bits never increase round-trip error") {
  auto vals = testing::random_values(1000, 412);
  Tensor t = Tensor::from_data({1000}, vals);
  double prev = 1e30;
  for (int bits : {2, 4, 8, 16}) {
    Tensor y = fake_quant_bits(t, bits, QuantMode::affine);
    double err = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      err = std::max(err, static_cast<double>(std::abs(y.data()[i] - vals[i])));
    }
    CHECK(err <= prev + 1e-9);
    prev = err;
  }
}

TEST_CASE("wide bit widths survive float bounds checking") {
  auto vals = testing::random_values(64, 88);
  Tensor t = Tensor::from_data({64}, vals);
  for (int bits : {24, 31, 32}) {
    QuantParams p = calibrate(t, bits, QuantMode::affine);
    Tensor rt = dequantize(quantize(t, p), p);
    CHECK(rt.size() == t.size());
  }
}

TEST_CASE("layer_size_bits multiplies and rejects bad input") {
  CHECK(layer_size_bits(100, 4) == 400);
  CHECK(layer_size_bits(7, 0) == 0);
  CHECK_THROWS_AS(layer_size_bits(0, 4), ContractError);
  CHECK_THROWS_AS(layer_size_bits(10, 33), ContractError);
}
