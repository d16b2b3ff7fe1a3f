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

#ifndef DQMQ_QUANT_HPP
#define DQMQ_QUANT_HPP

#include <cstdint>
#include <span>

#include "dqmq/tensor.hpp"

namespace dqmq {

enum class QuantMode { affine, symmetric };

/// Scale, zero point and integer range for one tensor.
///
/// Affine maps to [0, 2^a - 1]; symmetric keeps z = 0 and maps to
/// [-(2^{a-1} - 1), 2^{a-1} - 1]. All arithmetic runs in double so the
/// full 32-bit range stays exact.
struct QuantParams {
  double scale = 1.0;
  double zero_point = 0.0;
  int bits = 8;
  QuantMode mode = QuantMode::symmetric;

  double qmin() const;
  double qmax() const;
  /// Real-valued calibration range [(qmin-z)s, (qmax-z)s]; the STE clip range.
  double range_lo() const { return (qmin() - zero_point) * scale; }
  double range_hi() const { return (qmax() - zero_point) * scale; }

  void validate() const;
};

QuantParams calibrate(std::span<const float> values, int bits, QuantMode mode);
QuantParams calibrate(const Tensor& t, int bits, QuantMode mode);

/// clamp(round(x/s + z), qmin, qmax); round is half-away-from-zero.
/// Output is integer-valued, carries no tape history.
Tensor quantize(const Tensor& t, const QuantParams& p);

/// (q - z) * s. Rejects non-integer or out-of-range inputs.
Tensor dequantize(const Tensor& q, const QuantParams& p);

/// dequantize(quantize(t)) in one pass with a clipped straight-through
/// gradient: unit inside the calibration range, zero outside.
Tensor fake_quant(const Tensor& t, const QuantParams& p);

/// The same scale/zero-point transform and its inverse with no rounding or
/// clamping; algebraically the identity. Gradient is the identity too.
Tensor exact_mode(const Tensor& t, const QuantParams& p);

/// Dynamic-calibration fake quantization at a given bit width.
/// bits == 0 prunes: output is zeros and no gradient reaches t.
/// When exact is true the rounding-free transform is used instead.
Tensor fake_quant_bits(const Tensor& t, int bits, QuantMode mode,
                       bool exact = false);

/// param_count * bits; bits == 0 encodes a pruned layer.
std::int64_t layer_size_bits(std::int64_t param_count, int bits);

}  // namespace dqmq

#endif  // DQMQ_QUANT_HPP
