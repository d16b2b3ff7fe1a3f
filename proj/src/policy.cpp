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

#include "dqmq/policy.hpp"

#include <cmath>

#include "dqmq/errors.hpp"

namespace dqmq {

namespace {

constexpr int kHeadChannels = 4;
constexpr int kFeat = 4;
constexpr int kHidden = 8;
constexpr int kPoolSize = 3;

Tensor kaiming(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return uniform_tensor(shape, rng, -bound, bound, true);
}

/// Pooled feature vector [kFeat] for a layer input. The input is detached:
/// decision gradients update agent parameters only, so master-weight
/// gradients stay the plain task-loss gradients (the Alg. 2 isolation).
Tensor agent_features(const Agent& a, const Tensor& x_l) {
  Tensor x = detach(x_l);
  if (a.input_kind == LayerKind::conv) {
    if (x.ndim() != 4) throw ContractError("agent_features: conv agent expects 4-D input");
    Tensor h = relu(bias_add_nchw(conv2d(x, a.w1, 2, 1), a.b1));
    h = relu(bias_add_nchw(conv2d(h, a.w2, 2, 1), a.b2));
    return mean_dim0(global_avg_pool(h));
  }
  if (x.ndim() != 2) throw ContractError("agent_features: fc agent expects 2-D input");
  Tensor pooled = reshape(mean_dim0(x), {1, x.dim(1)});
  Tensor h = relu(bias_add_cols(matmul(pooled, a.w1), a.b1));
  h = relu(bias_add_cols(matmul(h, a.w2), a.b2));
  return reshape(h, {kFeat});
}

}  // namespace

std::vector<Tensor*> Agent::parameters() {
  return {&w1, &b1, &w2, &b2, &w3, &b3, &w4, &b4};
}

std::vector<Tensor*> PolicyState::parameters() {
  std::vector<Tensor*> out;
  for (auto& a : agents) {
    for (Tensor* t : a.parameters()) out.push_back(t);
  }
  return out;
}

PolicyState build_policy(const Model& m, std::uint64_t seed) {
  PolicyState p;
  Rng rng(seed);
  for (int i = 0; i < m.num_layers(); ++i) {
    const auto& spec = m.layers[static_cast<std::size_t>(i)];
    if (!spec.quantizable) continue;
    Agent a;
    a.input_kind = spec.kind;
    if (spec.kind == LayerKind::conv) {
      a.w1 = kaiming({kHeadChannels, spec.in_ch, 3, 3},
                     static_cast<std::int64_t>(spec.in_ch) * 9, rng);
      a.b1 = Tensor::zeros({kHeadChannels}, true);
      a.w2 = kaiming({kHeadChannels, kHeadChannels, 3, 3}, kHeadChannels * 9, rng);
      a.b2 = Tensor::zeros({kHeadChannels}, true);
    } else {
      a.w1 = kaiming({spec.in_features, kHidden}, spec.in_features, rng);
      a.b1 = Tensor::zeros({kHidden}, true);
      a.w2 = kaiming({kHidden, kFeat}, kHidden, rng);
      a.b2 = Tensor::zeros({kFeat}, true);
    }
    a.w3 = kaiming({kFeat + 1, kHidden}, kFeat + 1, rng);
    a.b3 = Tensor::zeros({kHidden}, true);
    // Zero final layer: the policy starts uniform over its pool.
    a.w4 = Tensor::zeros({kHidden, kPoolSize}, true);
    a.b4 = Tensor::zeros({kPoolSize}, true);
    p.agents.push_back(std::move(a));
  }
  return p;
}

void set_pools(PolicyState& p, std::span<const int> pools) {
  if (pools.size() != p.agents.size()) {
    throw ContractError("set_pools: " + std::to_string(pools.size()) + " pools for " +
                        std::to_string(p.agents.size()) + " agents");
  }
  for (std::size_t i = 0; i < pools.size(); ++i) {
    if (pools[i] < 0 || pools[i] > 2) throw ContractError("set_pools: pool out of range");
    p.agents[i].pool = pools[i];
  }
}

Tensor agent_logits(const Agent& a, const Tensor& x_l, double h_l) {
  if (!(h_l >= 0.0) || !std::isfinite(h_l)) {
    throw ContractError("agent_logits: sensitivity must be finite and >= 0");
  }
  Tensor feat = agent_features(a, x_l);
  Tensor h_feat = Tensor::scalar(static_cast<float>(std::log1p(h_l)));
  Tensor joined = reshape(concat1d(feat, h_feat), {1, kFeat + 1});
  Tensor hid = relu(bias_add_cols(matmul(joined, a.w3), a.b3));
  Tensor logits = bias_add_cols(matmul(hid, a.w4), a.b4);
  return reshape(logits, {kPoolSize});
}

Tensor decide_soft(const Agent& a, const Tensor& x_l, double h_l,
                   double temperature) {
  if (!(temperature > 0.0)) throw ContractError("decide_soft: temperature must be positive");
  Tensor logits = agent_logits(a, x_l, h_l);
  return softmax(mul_scalar(logits, static_cast<float>(1.0 / temperature)), 0);
}

HardDecision decide_hard(const Agent& a, const Tensor& x_l, double h_l,
                         double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw ContractError("decide_hard: temperature must be positive");
  Tensor logits = agent_logits(a, x_l, h_l);
  Tensor logp = log_softmax(mul_scalar(logits, static_cast<float>(1.0 / temperature)), 0);
  auto lp = logp.data();
  std::vector<float> probs(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) probs[i] = std::exp(lp[i]);
  const std::size_t k = rng.categorical(probs);
  HardDecision d;
  d.index = static_cast<int>(k);
  d.bits = pool_bits(a.pool)[k];
  d.log_prob = take(logp, static_cast<std::int64_t>(k));
  return d;
}

RewardRecord compute_rewards(std::span<const std::int64_t> param_counts,
                             std::span<const int> actions, double alpha,
                             double loss) {
  if (param_counts.size() != actions.size()) {
    throw ContractError("compute_rewards: counts/actions length mismatch");
  }
  if (alpha < 0.0) throw ContractError("compute_rewards: alpha must be >= 0");
  std::int64_t total = 0;
  for (auto n : param_counts) total += n;
  if (total <= 0) throw ContractError("compute_rewards: empty manifest");

  RewardRecord rec;
  rec.alpha = alpha;
  rec.loss = loss;
  rec.R.resize(actions.size());
  rec.r.resize(actions.size());
  for (std::size_t l = 0; l < actions.size(); ++l) {
    const int a = actions[l];
    if (a < 0 || a > 32) throw ContractError("compute_rewards: action outside [0,32]");
    rec.R[l] = static_cast<double>(param_counts[l]) * (32.0 - a) / (32.0 * static_cast<double>(total));
    rec.sum_R += rec.R[l];
  }
  double suffix = 0.0;
  for (std::size_t l = actions.size(); l-- > 0;) {
    suffix += rec.R[l];
    rec.r[l] = alpha * suffix - loss;
  }
  return rec;
}

double reward_for_bits(std::span<const std::int64_t> param_counts,
                       std::size_t layer, int bits) {
  if (layer >= param_counts.size()) throw ContractError("reward_for_bits: layer out of range");
  std::int64_t total = 0;
  for (auto n : param_counts) total += n;
  return static_cast<double>(param_counts[layer]) * (32.0 - bits) /
         (32.0 * static_cast<double>(total));
}

Tensor score_objective(std::span<const Tensor> log_probs, double advantage) {
  if (log_probs.empty()) throw ContractError("score_objective: no recorded log-probs");
  Tensor total;
  for (const auto& lp : log_probs) {
    if (!lp.defined() || lp.size() != 1) {
      throw ContractError("score_objective: log-probs must be recorded scalars");
    }
    total = total.defined() ? add(total, lp) : lp;
  }
  return mul_scalar(total, static_cast<float>(advantage));
}

void append_policy_tensors(const PolicyState& p, CheckpointData& c) {
  nlohmann::json meta;
  meta["temperature"] = p.temperature;
  auto pools = nlohmann::json::array();
  for (const auto& a : p.agents) pools.push_back(a.pool);
  meta["pools"] = std::move(pools);
  c.meta["policy"] = std::move(meta);

  const char* names[] = {"w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"};
  for (std::size_t k = 0; k < p.agents.size(); ++k) {
    auto params = const_cast<Agent&>(p.agents[k]).parameters();
    for (std::size_t f = 0; f < params.size(); ++f) {
      auto d = params[f]->data();
      c.tensors.push_back({"agent" + std::to_string(k) + ":" + names[f],
                           params[f]->shape(), std::vector<float>(d.begin(), d.end())});
    }
  }
}

PolicyState policy_from_checkpoint(const CheckpointData& c, const Model& m) {
  if (!c.meta.contains("policy")) {
    throw FormatError("policy_from_checkpoint: meta lacks a policy record");
  }
  PolicyState p = build_policy(m, 0);
  p.temperature = c.meta["policy"].at("temperature").get<double>();
  const auto pools = c.meta["policy"].at("pools").get<std::vector<int>>();
  set_pools(p, pools);

  const char* names[] = {"w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"};
  for (std::size_t k = 0; k < p.agents.size(); ++k) {
    auto params = p.agents[k].parameters();
    for (std::size_t f = 0; f < params.size(); ++f) {
      const std::string name = "agent" + std::to_string(k) + ":" + names[f];
      const NamedTensor* nt = c.find(name);
      if (!nt) throw FormatError("policy_from_checkpoint: missing tensor '" + name + "'");
      if (nt->shape != params[f]->shape()) {
        throw FormatError("policy_from_checkpoint: tensor '" + name + "' shape mismatch");
      }
      auto span = params[f]->mutable_data();
      std::copy(nt->data.begin(), nt->data.end(), span.begin());
    }
  }
  return p;
}

}  // namespace dqmq
