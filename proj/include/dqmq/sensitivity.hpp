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

#ifndef DQMQ_SENSITIVITY_HPP
#define DQMQ_SENSITIVITY_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dqmq/model.hpp"
#include "dqmq/tensor.hpp"
#include "json.hpp"

namespace dqmq {

inline constexpr int kPoolLow = 0;
inline constexpr int kPoolMid = 1;
inline constexpr int kPoolHigh = 2;
inline constexpr std::array<std::array<int, 3>, 3> kPools{{{0, 1, 2}, {2, 4, 8}, {8, 16, 32}}};

std::span<const int> pool_bits(int pool);

struct LayerTrace {
  std::string layer;
  double trace = 0.0;
  double stderr_ = 0.0;
  int pool = kPoolMid;
};

struct SensitivityProfile {
  std::vector<LayerTrace> layers;  // quantizable layers, model order
  int probes = 0;
  int quality_tag = 0;  // quality level of the batch used, 0 = mixed

  nlohmann::json to_json() const;
  static SensitivityProfile from_json(const nlohmann::json& j);
};

struct Batch {
  Tensor x;
  std::vector<int> y;
};

/// Evaluates d(loss)/d(theta) at theta's current values into grad_out.
/// Called repeatedly at perturbed parameter values; must rebuild its tape
/// and clear stale gradient accumulators on every call.
using GradFn = std::function<void(std::span<double> grad_out)>;

/// Hv by central finite differences: (g(theta + e v) - g(theta - e v)) / 2e
/// with e = eps * (1 + |theta|_inf). Restores theta before returning.
std::vector<double> hvp_fd(Tensor& theta, const GradFn& grad,
                           std::span<const double> v, double eps = 1e-3);

struct TraceEstimate {
  double trace = 0.0;
  double stderr_ = 0.0;
};

/// Mean of v' H v over Rademacher probes, fixed order for determinism.
TraceEstimate hutchinson_trace(Tensor& theta, const GradFn& grad, int probes,
                               std::uint64_t seed, double eps = 1e-3);

/// Cross-entropy loss gradient of the plain forward w.r.t. one layer's weights.
GradFn model_layer_gradfn(Model& m, const Batch& batch, int layer_idx);

TraceEstimate layer_trace(Model& m, const Batch& batch, int layer_idx,
                          int probes, std::uint64_t seed, double eps = 1e-3);

/// Traces for every quantizable layer plus tertile pool assignment. Each
/// stored trace is the block trace divided by the layer's weight count, so
/// pool ranks reflect per-weight curvature rather than layer width.
/// Per-layer probe streams depend only on (seed, layer), so profiles taken
/// on different batches share probe noise and stay comparable.
SensitivityProfile profile_model(Model& m, const Batch& batch, int probes,
                                 std::uint64_t seed, int quality_tag = 0,
                                 double eps = 1e-3);

/// Tertile rule: bottom third of traces -> LOW, middle -> MID, top -> HIGH;
/// ties broken so the earlier layer lands in the higher pool. Negative
/// estimates are clamped to zero.
std::vector<int> assign_pools(std::span<const double> traces);

enum class SweepDirection { trace_weighted, top_hessian };

/// Loss of the plain forward at theta + t*d for each amplitude t. d is unit
/// norm over all quantizable weights: per-layer random scaled by sqrt(h_l)
/// (trace_weighted) or the leading Hessian eigenvector by power iteration
/// (top_hessian). Amplitudes must contain 0.
std::vector<std::pair<double, double>> perturbation_sweep(
    Model& m, const Batch& batch, std::span<const double> traces,
    std::span<const double> amplitudes, SweepDirection dir, std::uint64_t seed,
    int power_iters = 12, double eps = 1e-3);

}  // namespace dqmq

#endif  // DQMQ_SENSITIVITY_HPP
