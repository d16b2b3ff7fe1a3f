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

#ifndef DQMQ_TRAINER_HPP
#define DQMQ_TRAINER_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dqmq/dataquality.hpp"
#include "dqmq/model.hpp"
#include "dqmq/policy.hpp"
#include "dqmq/sensitivity.hpp"
#include "json.hpp"

namespace dqmq {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double lr_start = 0.05;
  double lr_end = 0.001;
  double momentum = 0.9;
  double grad_clip = 5.0;  // global-norm cap per parameter group, 0 = off
  double alpha = 0.5;
  double stage_split = 0.5;  // fraction of epochs run in the soft stage
  std::uint64_t seed = 1;
  int trace_refresh_every = 1;  // epochs between profile refreshes; 0 = initial only
  int trace_probes = 4;
  int trace_batch = 128;
  double trace_eps = 1e-3;
  double temperature = 1.0;
  std::string pipeline = "dqmq";   // dqmq | fixed | plain
  int fixed_bits = 4;
  std::string quantizer = "fake";  // fake | exact
  std::string quant_mode = "symmetric";  // symmetric | affine
  bool optimizer_enabled = true;   // off: masters must stay bitwise frozen
  int eval_samples = 500;          // per-epoch metric subset; 0 disables
  TopologyConfig topology;

  QuantMode mode() const;
  bool exact() const;
  void validate() const;
  /// Rejects unknown keys, naming the offender.
  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct StepRecord {
  double loss = 0.0;   // cross-entropy
  double sum_R = 0.0;  // hard: realized; soft: expected
  double J = 0.0;      // loss - alpha * sum_R
  std::vector<int> actions;  // hard: sampled bits; soft: argmax bits
  std::string stage;
};

struct EpochRecord {
  int epoch = 0;
  std::string stage;
  double mean_loss = 0.0;
  double mean_sum_R = 0.0;
  double mean_J = 0.0;
  double alpha = 0.0;
  double lr = 0.0;
  double eval_accuracy = 0.0;  // subset accuracy, argmax decisions
  std::vector<int> action_mode;  // modal bits per quantizable layer
  double compression = 0.0;      // of action_mode

  nlohmann::json to_json() const;
};

/// Classical momentum: v = mu v + g; theta -= lr v.
struct SgdMomentum {
  explicit SgdMomentum(std::vector<Tensor*> params, double momentum = 0.9);
  void step(double lr);

  std::vector<Tensor*> params;
  double momentum;
  std::vector<std::vector<float>> velocity;
};

class Trainer {
 public:
  Trainer(Model& model, PolicyState& policy, const Dataset& train,
          TrainConfig cfg);

  /// One optimizer step on an index batch. Exposed for step-level tests.
  StepRecord train_step(std::span<const std::int64_t> idx, int epoch);

  /// Full schedule: profile refreshes, stage switch, per-epoch records.
  std::vector<EpochRecord> fit();

  const SensitivityProfile& profile() const { return profile_; }
  std::string stage_for_epoch(int epoch) const;
  double lr_for_epoch(int epoch) const;
  Batch make_batch(std::span<const std::int64_t> idx) const;
  void refresh_profile(int epoch);

  Model& model;
  PolicyState& policy;
  const Dataset& data;
  TrainConfig cfg;

 private:
  StepRecord step_soft(const Batch& b);
  StepRecord step_hard(const Batch& b);
  StepRecord step_fixed(const Batch& b, int bits, const char* stage);
  double subset_accuracy();

  SgdMomentum opt_;
  std::vector<Tensor*> model_params_;
  std::vector<Tensor*> policy_params_;
  Baseline baseline_;
  Rng data_rng_;
  Rng policy_rng_;
  std::vector<std::int64_t> per_layer_h_idx_;  // quantizable slot per layer
  std::vector<std::int64_t> counts_;           // quantizable param counts
  SensitivityProfile profile_;
};

/// Trains with the policy frozen at one constant bit width.
std::vector<EpochRecord> fixed_precision_baseline(Model& m, const Dataset& train,
                                                  TrainConfig cfg, int bits);

}  // namespace dqmq

#endif  // DQMQ_TRAINER_HPP
