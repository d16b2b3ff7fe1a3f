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

#include "dqmq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dqmq/errors.hpp"

namespace dqmq {

namespace {

void check_bits(int bits) {
  if (bits < 1 || bits > 32) {
    throw ContractError("quant: bits must be in [1,32], got " + std::to_string(bits));
  }
}

double clamp_round(double x, const QuantParams& p) {
  return std::clamp(std::round(x / p.scale + p.zero_point), p.qmin(), p.qmax());
}

}  // namespace

double QuantParams::qmin() const {
  if (mode == QuantMode::affine) return 0.0;
  return -(std::pow(2.0, bits - 1) - 1.0);
}

double QuantParams::qmax() const {
  if (mode == QuantMode::affine) return std::pow(2.0, bits) - 1.0;
  return std::pow(2.0, bits - 1) - 1.0;
}

void QuantParams::validate() const {
  check_bits(bits);
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw ContractError("QuantParams: scale must be positive and finite");
  }
  if (mode == QuantMode::symmetric && zero_point != 0.0) {
    throw ContractError("QuantParams: symmetric mode requires zero_point == 0");
  }
  if (!std::isfinite(zero_point)) {
    throw ContractError("QuantParams: zero_point must be finite");
  }
}

QuantParams calibrate(std::span<const float> values, int bits, QuantMode mode) {
  check_bits(bits);
  if (values.empty()) throw ContractError("calibrate: empty tensor");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (float v : values) {
    if (!std::isfinite(v)) throw ContractError("calibrate: non-finite input");
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  QuantParams p;
  p.bits = bits;
  p.mode = mode;
  if (mode == QuantMode::affine) {
    if (hi == lo) {
      // Constant tensor: pin the grid so the constant round-trips exactly.
      p.scale = 1.0;
      p.zero_point = p.qmax() - hi;
    } else {
      p.scale = (hi - lo) / (p.qmax() - p.qmin());
      p.zero_point = std::round(p.qmax() - hi / p.scale);
    }
  } else {
    const double amax = std::max(std::abs(lo), std::abs(hi));
    const double denom = p.qmax();
    if (amax == 0.0) {
      p.scale = 1.0;
    } else if (denom == 0.0) {
      // 1-bit symmetric can only represent zero; any positive scale works.
      p.scale = amax;
    } else if (hi == lo) {
      // Constant tensor, z is pinned at 0: put the constant on the grid by
      // scaling (c / |c| is exact), so the round-trip is exact here too.
      p.scale = amax;
    } else {
      p.scale = amax / denom;
    }
    p.zero_point = 0.0;
  }
  p.validate();
  return p;
}

QuantParams calibrate(const Tensor& t, int bits, QuantMode mode) {
  return calibrate(t.data(), bits, mode);
}

Tensor quantize(const Tensor& t, const QuantParams& p) {
  p.validate();
  auto in = t.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = static_cast<float>(clamp_round(in[i], p));
  }
  return Tensor::from_data(t.shape(), std::move(out));
}

Tensor dequantize(const Tensor& q, const QuantParams& p) {
  p.validate();
  auto in = q.data();
  std::vector<float> out(in.size());
  // bits > 24 integers are not exactly representable in f32; widen the bound
  // to the nearest representable value so legitimate grid points pass.
  const double hi_bound = static_cast<double>(static_cast<float>(p.qmax()));
  const double lo_bound = static_cast<double>(static_cast<float>(p.qmin()));
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double v = in[i];
    if (std::abs(v - std::nearbyint(v)) > 1e-6 * std::max(1.0, std::abs(v))) {
      throw ContractError("dequantize: non-integer input " + std::to_string(v));
    }
    if (v < lo_bound || v > hi_bound) {
      throw ContractError("dequantize: value " + std::to_string(v) +
                          " outside [" + std::to_string(p.qmin()) + "," +
                          std::to_string(p.qmax()) + "]");
    }
    const double c = std::clamp(v, p.qmin(), p.qmax());
    out[i] = static_cast<float>((c - p.zero_point) * p.scale);
  }
  return Tensor::from_data(q.shape(), std::move(out));
}

Tensor fake_quant(const Tensor& t, const QuantParams& p) {
  p.validate();
  auto in = t.data();
  detail::FloatBuf value(in.size());
  detail::FloatBuf mask(in.size());
  const double lo = p.range_lo();
  const double hi = p.range_hi();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double x = in[i];
    value[i] = static_cast<float>((clamp_round(x, p) - p.zero_point) * p.scale);
    mask[i] = (x >= lo && x <= hi) ? 1.0f : 0.0f;
  }
  return unary_with_mask(t, std::move(value), std::move(mask), "fake_quant");
}

Tensor exact_mode(const Tensor& t, const QuantParams& p) {
  p.validate();
  auto in = t.data();
  detail::FloatBuf value(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double x = in[i];
    value[i] = static_cast<float>(((x / p.scale + p.zero_point) - p.zero_point) * p.scale);
  }
  return unary_with_mask(t, std::move(value), detail::FloatBuf(in.size(), 1.0f),
                         "exact_mode");
}

Tensor fake_quant_bits(const Tensor& t, int bits, QuantMode mode, bool exact) {
  if (bits == 0) {
    const auto n = static_cast<std::size_t>(t.size());
    return unary_with_mask(t, detail::FloatBuf(n, 0.0f), detail::FloatBuf(n, 0.0f),
                           "prune");
  }
  const QuantParams p = calibrate(t, bits, mode);
  return exact ? exact_mode(t, p) : fake_quant(t, p);
}

std::int64_t layer_size_bits(std::int64_t param_count, int bits) {
  if (param_count <= 0) throw ContractError("layer_size_bits: param_count must be positive");
  if (bits < 0 || bits > 32) throw ContractError("layer_size_bits: bits out of range");
  return param_count * bits;
}

}  // namespace dqmq
