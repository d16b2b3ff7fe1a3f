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

#ifndef DQMQ_POLICY_HPP
#define DQMQ_POLICY_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "dqmq/model.hpp"
#include "dqmq/rng.hpp"
#include "dqmq/sensitivity.hpp"
#include "dqmq/tensor.hpp"

namespace dqmq {

/// One per-layer decision agent, four learnable layers deep.
/// Conv-input agents: two stride-2 convs, global average pool, batch mean,
/// then two fully-connected layers on features joined with log1p(h_l).
/// Fc-input agents swap the conv pair for two fully-connected layers on the
/// batch-mean feature vector (a 1-D input leaves a conv head undefined).
struct Agent {
  LayerKind input_kind = LayerKind::conv;
  int pool = kPoolMid;
  Tensor w1, b1, w2, b2, w3, b3, w4, b4;

  std::vector<Tensor*> parameters();
};

struct PolicyState {
  std::vector<Agent> agents;  // one per quantizable layer, model order
  double temperature = 1.0;

  std::vector<Tensor*> parameters();
};

/// Deterministic init under seed; the final logit layer starts at zero so
/// every distribution begins uniform.
PolicyState build_policy(const Model& m, std::uint64_t seed);

void set_pools(PolicyState& p, std::span<const int> pools);

/// Pool logits for layer input x_l and sensitivity h_l, on the tape.
Tensor agent_logits(const Agent& a, const Tensor& x_l, double h_l);

/// softmax(logits / temperature); differentiable.
Tensor decide_soft(const Agent& a, const Tensor& x_l, double h_l,
                   double temperature);

struct HardDecision {
  int index = 0;     // position in the pool
  int bits = 0;      // pool_bits(pool)[index]
  Tensor log_prob;   // log softmax at the sampled index, on the tape
};

HardDecision decide_hard(const Agent& a, const Tensor& x_l, double h_l,
                         double temperature, Rng& rng);

struct RewardRecord {
  std::vector<double> R;  // per-layer size reduction, in [0,1]
  std::vector<double> r;  // r_l = alpha * sum_{i>=l} R_i - loss
  double sum_R = 0.0;
  double alpha = 0.0;
  double loss = 0.0;
};

/// R_l = n_l (32 - a_l) / (32 sum_j n_j).
RewardRecord compute_rewards(std::span<const std::int64_t> param_counts,
                             std::span<const int> actions, double alpha,
                             double loss);

/// Single-layer reward value for one candidate bit width.
double reward_for_bits(std::span<const std::int64_t> param_counts,
                       std::size_t layer, int bits);

/// advantage * sum(log_probs): backward yields the score-function gradient
/// (L - baseline) * grad log P(a) on the agent parameters.
Tensor score_objective(std::span<const Tensor> log_probs, double advantage);

/// Exponential moving average of L for variance reduction.
struct Baseline {
  double decay = 0.9;
  double value = 0.0;
  bool primed = false;

  double get(double fallback) const { return primed ? value : fallback; }
  void update(double L) {
    value = primed ? decay * value + (1.0 - decay) * L : L;
    primed = true;
  }
};

/// Checkpoint integration: tensors named "agent<k>:<field>", plus a
/// "policy" meta object carrying temperature and pools.
void append_policy_tensors(const PolicyState& p, CheckpointData& c);
PolicyState policy_from_checkpoint(const CheckpointData& c, const Model& m);

}  // namespace dqmq

#endif  // DQMQ_POLICY_HPP
