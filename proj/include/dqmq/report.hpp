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

#ifndef DQMQ_REPORT_HPP
#define DQMQ_REPORT_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dqmq/dataquality.hpp"
#include "dqmq/model.hpp"
#include "dqmq/policy.hpp"
#include "dqmq/sensitivity.hpp"
#include "json.hpp"

namespace dqmq {

/// Top-1 accuracy in percent.
double accuracy_from_logits(const Tensor& logits, std::span<const int> y);

/// Full-precision weight bits over quantized weight bits, weights only.
/// Pruned layers drop out of the denominator; all layers pruned is an error.
double compression_rate(std::span<const std::int64_t> param_counts,
                        std::span<const int> actions);

/// One hooked forward with argmax pool decisions; one action per layer.
std::vector<int> policy_actions_argmax(const Model& m, const PolicyState& policy,
                                       const SensitivityProfile& profile,
                                       const Tensor& x, double temperature = 1.0,
                                       QuantMode mode = QuantMode::symmetric,
                                       bool exact = false);

struct EvalOptions {
  std::string mode = "policy";  // policy | fixed
  int fixed_bits = 8;
  int batch = 250;
  QuantMode quant_mode = QuantMode::symmetric;
  bool exact = false;
  double temperature = 1.0;
};

struct EvalReport {
  std::string mode;
  int fixed_bits = 0;
  double overall_accuracy = 0.0;            // percent
  std::map<int, double> level_accuracy;     // percent, keyed by quality level
  std::map<int, std::int64_t> level_counts;
  std::vector<int> modal_actions;           // per quantizable layer
  std::vector<std::map<int, int>> bit_histogram;  // layer -> bits -> batches
  double compression = 0.0;
  std::int64_t weight_bits_full = 0;
  std::int64_t weight_bits_quant = 0;
  double weight_mb_full = 0.0;   // MiB at 32-bit accounting
  double weight_mb_quant = 0.0;  // MiB at modal actions
  std::int64_t policy_params = 0;  // decision-network overhead, counted apart

  nlohmann::json to_json() const;
};

/// Argmax decisions per batch, accuracy per quality level and overall.
EvalReport evaluate(const Model& m, const PolicyState& policy,
                    const SensitivityProfile& profile, const Dataset& ds,
                    const EvalOptions& opt);

/// Spearman rank correlation with average ranks on ties.
double spearman(std::span<const double> a, std::span<const double> b);

struct SensitivityQualityTable {
  std::vector<int> levels;
  std::vector<std::string> layer_names;
  std::vector<std::vector<double>> traces;   // [level][layer]
  std::vector<std::vector<double>> stderrs;  // [level][layer]
  std::vector<std::vector<double>> rho;      // [level][level]

  nlohmann::json to_json() const;
};

/// Per-layer traces at each quality level present in ds, shared probe seed,
/// plus the level-pair Spearman matrix.
SensitivityQualityTable sensitivity_vs_quality(Model& m, const Dataset& ds,
                                               std::span<const int> levels,
                                               int probes, std::uint64_t seed,
                                               int batch = 128,
                                               double eps = 1e-3);

struct SweepCurve {
  int quality_level = 0;
  std::vector<std::pair<double, double>> points;  // (amplitude, loss)
};

/// CSV writers. Deterministic byte-for-byte: fixed header, fixed row order,
/// shortest round-trip float formatting.
void emit_sweep_csv(std::span<const SweepCurve> curves, const std::string& path);
void emit_decision_histogram_csv(const EvalReport& report,
                                 std::span<const int> pools,
                                 const std::string& path);
void emit_sensitivity_csv(const SensitivityQualityTable& table,
                          const std::string& path);
void emit_correlation_csv(const SensitivityQualityTable& table,
                          const std::string& path);

}  // namespace dqmq

#endif  // DQMQ_REPORT_HPP
