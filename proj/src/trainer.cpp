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

#include "dqmq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "dqmq/errors.hpp"
#include "dqmq/report.hpp"

namespace dqmq {

QuantMode TrainConfig::mode() const {
  if (quant_mode == "symmetric") return QuantMode::symmetric;
  if (quant_mode == "affine") return QuantMode::affine;
  throw ConfigError("TrainConfig: quant_mode must be 'symmetric' or 'affine'");
}

bool TrainConfig::exact() const {
  if (quantizer == "fake") return false;
  if (quantizer == "exact") return true;
  throw ConfigError("TrainConfig: quantizer must be 'fake' or 'exact'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch size must be >= 1");
  if (!(lr_start >= lr_end && lr_end > 0.0)) {
    throw ConfigError("TrainConfig: need lr_start >= lr_end > 0");
  }
  if (alpha < 0.0) throw ConfigError("TrainConfig: alpha must be >= 0");
  if (grad_clip < 0.0) throw ConfigError("TrainConfig: grad_clip must be >= 0");
  if (stage_split < 0.0 || stage_split > 1.0) {
    throw ConfigError("TrainConfig: stage_split must lie in [0,1]");
  }
  if (pipeline != "dqmq" && pipeline != "fixed" && pipeline != "plain") {
    throw ConfigError("TrainConfig: pipeline must be dqmq, fixed or plain");
  }
  if (fixed_bits < 0 || fixed_bits > 32) {
    throw ConfigError("TrainConfig: fixed_bits outside [0,32]");
  }
  if (!(temperature > 0.0)) throw ConfigError("TrainConfig: temperature must be positive");
  if (trace_probes < 1 || trace_batch < 1) {
    throw ConfigError("TrainConfig: trace_probes and trace_batch must be >= 1");
  }
  if (trace_refresh_every < 0) {
    throw ConfigError("TrainConfig: trace_refresh_every must be >= 0 (0 keeps the initial profile)");
  }
  mode();
  exact();
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [key, val] : j.items()) {
    if (key == "epochs") c.epochs = val.get<int>();
    else if (key == "batch_size") c.batch_size = val.get<int>();
    else if (key == "lr_start") c.lr_start = val.get<double>();
    else if (key == "lr_end") c.lr_end = val.get<double>();
    else if (key == "momentum") c.momentum = val.get<double>();
    else if (key == "grad_clip") c.grad_clip = val.get<double>();
    else if (key == "alpha") c.alpha = val.get<double>();
    else if (key == "stage_split") c.stage_split = val.get<double>();
    else if (key == "seed") c.seed = val.get<std::uint64_t>();
    else if (key == "trace_refresh_every") c.trace_refresh_every = val.get<int>();
    else if (key == "trace_probes") c.trace_probes = val.get<int>();
    else if (key == "trace_batch") c.trace_batch = val.get<int>();
    else if (key == "trace_eps") c.trace_eps = val.get<double>();
    else if (key == "temperature") c.temperature = val.get<double>();
    else if (key == "pipeline") c.pipeline = val.get<std::string>();
    else if (key == "fixed_bits") c.fixed_bits = val.get<int>();
    else if (key == "quantizer") c.quantizer = val.get<std::string>();
    else if (key == "quant_mode") c.quant_mode = val.get<std::string>();
    else if (key == "optimizer_enabled") c.optimizer_enabled = val.get<bool>();
    else if (key == "eval_samples") c.eval_samples = val.get<int>();
    else if (key == "topology") {
      for (const auto& [tk, tv] : val.items()) {
        if (tk == "name") c.topology.name = tv.get<std::string>();
        else if (tk == "width") c.topology.width = tv.get<int>();
        else if (tk == "classes") c.topology.classes = tv.get<int>();
        else if (tk == "input_channels") c.topology.input_channels = tv.get<int>();
        else if (tk == "seed") c.topology.seed = tv.get<std::uint64_t>();
        else throw ConfigError("TrainConfig: unknown config key 'topology." + tk + "'");
      }
    } else {
      throw ConfigError("TrainConfig: unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr_start", lr_start},
          {"lr_end", lr_end},
          {"momentum", momentum},
          {"grad_clip", grad_clip},
          {"alpha", alpha},
          {"stage_split", stage_split},
          {"seed", seed},
          {"trace_refresh_every", trace_refresh_every},
          {"trace_probes", trace_probes},
          {"trace_batch", trace_batch},
          {"trace_eps", trace_eps},
          {"temperature", temperature},
          {"pipeline", pipeline},
          {"fixed_bits", fixed_bits},
          {"quantizer", quantizer},
          {"quant_mode", quant_mode},
          {"optimizer_enabled", optimizer_enabled},
          {"eval_samples", eval_samples},
          {"topology",
           {{"name", topology.name},
            {"width", topology.width},
            {"classes", topology.classes},
            {"input_channels", topology.input_channels},
            {"seed", topology.seed}}}};
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},          {"stage", stage},
          {"loss", mean_loss},       {"sum_R", mean_sum_R},
          {"J", mean_J},             {"alpha", alpha},
          {"lr", lr},                {"eval_accuracy", eval_accuracy},
          {"action_mode", action_mode}, {"compression", compression}};
}

SgdMomentum::SgdMomentum(std::vector<Tensor*> p, double mu)
    : params(std::move(p)), momentum(mu) {
  velocity.reserve(params.size());
  for (Tensor* t : params) {
    velocity.emplace_back(static_cast<std::size_t>(t->size()), 0.0f);
  }
}

void SgdMomentum::step(double lr) {
  if (!(lr > 0.0)) throw ContractError("SgdMomentum: lr must be positive");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor* t = params[i];
    auto& v = velocity[i];
    auto data = t->mutable_data();
    if (t->has_grad()) {
      auto g = t->grad();
      for (std::size_t k = 0; k < v.size(); ++k) {
        v[k] = static_cast<float>(momentum * v[k] + g[k]);
        data[k] -= static_cast<float>(lr * v[k]);
      }
    } else {
      for (std::size_t k = 0; k < v.size(); ++k) {
        v[k] = static_cast<float>(momentum * v[k]);
        data[k] -= static_cast<float>(lr * v[k]);
      }
    }
  }
}

namespace {

std::vector<Tensor*> all_params(Model& m, PolicyState& p) {
  auto out = m.parameters();
  for (Tensor* t : p.parameters()) out.push_back(t);
  return out;
}

void zero_grads(std::span<Tensor* const> params) {
  for (Tensor* t : params) t->zero_grad();
}

void clip_group(std::span<Tensor* const> params, double clip) {
  if (!(clip > 0.0)) return;
  double sq = 0.0;
  for (Tensor* t : params) {
    if (!t->has_grad()) continue;
    for (float g : t->grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= clip) return;
  const float s = static_cast<float>(clip / norm);
  for (Tensor* t : params) {
    if (!t->has_grad()) continue;
    for (float& g : t->mutable_grad()) g *= s;
  }
}

}  // namespace

Trainer::Trainer(Model& model_, PolicyState& policy_, const Dataset& train,
                 TrainConfig cfg_)
    : model(model_),
      policy(policy_),
      data(train),
      cfg(std::move(cfg_)),
      opt_(all_params(model_, policy_), cfg_.momentum),
      model_params_(model_.parameters()),
      policy_params_(policy_.parameters()),
      data_rng_(cfg_.seed ^ 0xD1B54A32D192ED03ull),
      policy_rng_(cfg_.seed ^ 0x8CB92BA72F3D8DD7ull) {
  cfg.validate();
  if (data.count() < 1) throw ContractError("Trainer: empty dataset");
  per_layer_h_idx_.assign(static_cast<std::size_t>(model.num_layers()), -1);
  std::int64_t q = 0;
  for (int i = 0; i < model.num_layers(); ++i) {
    if (model.layers[static_cast<std::size_t>(i)].quantizable) {
      per_layer_h_idx_[static_cast<std::size_t>(i)] = q++;
    }
  }
  counts_ = model.quantizable_param_counts();
  if (cfg.pipeline == "dqmq") {
    if (static_cast<std::int64_t>(policy.agents.size()) != q) {
      throw ContractError("Trainer: policy has " + std::to_string(policy.agents.size()) +
                          " agents for " + std::to_string(q) + " quantizable layers");
    }
    refresh_profile(0);
  }
}

std::string Trainer::stage_for_epoch(int epoch) const {
  if (cfg.pipeline == "fixed") return "fixed";
  if (cfg.pipeline == "plain") return "plain";
  const int soft_epochs = static_cast<int>(std::ceil(cfg.epochs * cfg.stage_split));
  return epoch < soft_epochs ? "soft" : "hard";
}

double Trainer::lr_for_epoch(int epoch) const {
  if (cfg.epochs == 1) return cfg.lr_start;
  const double f = static_cast<double>(epoch) / (cfg.epochs - 1);
  return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * f;
}

Batch Trainer::make_batch(std::span<const std::int64_t> idx) const {
  const std::int64_t isz = data.image_size();
  std::vector<float> x(static_cast<std::size_t>(idx.size()) * static_cast<std::size_t>(isz));
  Batch b;
  b.y.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto img = data.image(idx[i]);
    std::copy(img.begin(), img.end(), x.begin() + static_cast<std::int64_t>(i) * isz);
    b.y.push_back(data.labels[static_cast<std::size_t>(idx[i])]);
  }
  b.x = Tensor::from_data({static_cast<int>(idx.size()), data.channels, data.height, data.width},
                          std::move(x));
  return b;
}

void Trainer::refresh_profile(int epoch) {
  Rng trace_rng(cfg.seed ^ (0xA0761D6478BD642Full + static_cast<std::uint64_t>(epoch)));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(data.count()));
  std::iota(idx.begin(), idx.end(), 0);
  trace_rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(std::min<std::int64_t>(cfg.trace_batch, data.count())));
  Batch b = make_batch(idx);
  // Probe seed is epoch-independent: refreshes share probe noise, so pool
  // changes reflect the data, not fresh Monte-Carlo draws.
  profile_ = profile_model(model, b, cfg.trace_probes, cfg.seed ^ 0xE7037ED1A0B428DBull,
                           /*quality_tag=*/0, cfg.trace_eps);
  std::vector<int> pools;
  for (const auto& l : profile_.layers) pools.push_back(l.pool);
  set_pools(policy, pools);
}

StepRecord Trainer::train_step(std::span<const std::int64_t> idx, int epoch) {
  const Batch b = make_batch(idx);
  const std::string stage = stage_for_epoch(epoch);
  StepRecord rec;
  if (stage == "plain") {
    rec = step_fixed(b, 32, "plain");
  } else if (stage == "fixed") {
    rec = step_fixed(b, cfg.fixed_bits, "fixed");
  } else if (stage == "soft") {
    rec = step_soft(b);
  } else {
    rec = step_hard(b);
  }
  if (!std::isfinite(rec.loss)) {
    throw NumericError("train_step: non-finite loss " + std::to_string(rec.loss) +
                       " in " + stage + " stage at epoch " + std::to_string(epoch));
  }
  if (cfg.optimizer_enabled) {
    clip_group(model_params_, cfg.grad_clip);
    clip_group(policy_params_, cfg.grad_clip);
    opt_.step(lr_for_epoch(epoch));
  }
  return rec;
}

StepRecord Trainer::step_fixed(const Batch& b, int bits, const char* stage) {
  zero_grads(opt_.params);
  Tensor logits;
  if (std::string(stage) == "plain") {
    logits = forward_plain(model, b.x);
  } else {
    std::vector<int> actions(static_cast<std::size_t>(model.num_quantizable()), bits);
    logits = forward_quantized(model, b.x, actions, cfg.mode(), cfg.exact());
  }
  Tensor ce = cross_entropy(logits, b.y);
  backward(ce);
  StepRecord rec;
  rec.stage = stage;
  rec.loss = ce.item();
  rec.actions.assign(static_cast<std::size_t>(model.num_quantizable()),
                     std::string(stage) == "plain" ? 32 : bits);
  const auto rew = compute_rewards(counts_, rec.actions, cfg.alpha, rec.loss);
  rec.sum_R = rew.sum_R;
  rec.J = rec.loss - cfg.alpha * rec.sum_R;
  return rec;
}

StepRecord Trainer::step_soft(const Batch& b) {
  zero_grads(opt_.params);
  const bool exact = cfg.exact();
  const QuantMode mode = cfg.mode();
  std::vector<Tensor> probs(policy.agents.size());
  std::vector<int> argmax_bits(policy.agents.size(), 32);

  auto hook = [&](int layer, const Tensor& w, const Tensor& x) {
    const std::int64_t slot = per_layer_h_idx_[static_cast<std::size_t>(layer)];
    if (slot < 0) return std::make_pair(w, x);
    const Agent& agent = policy.agents[static_cast<std::size_t>(slot)];
    const double h = std::max(0.0, profile_.layers[static_cast<std::size_t>(slot)].trace);
    Tensor p = decide_soft(agent, x, h, cfg.temperature);
    probs[static_cast<std::size_t>(slot)] = p;
    const auto bits = pool_bits(agent.pool);
    auto pv = p.data();
    argmax_bits[static_cast<std::size_t>(slot)] =
        bits[static_cast<std::size_t>(std::max_element(pv.begin(), pv.end()) - pv.begin())];
    Tensor wq, xq;
    for (std::size_t k = 0; k < bits.size(); ++k) {
      Tensor pk = take(p, static_cast<std::int64_t>(k));
      Tensor wk = mul(fake_quant_bits(w, bits[k], mode, exact), pk);
      Tensor xk = mul(fake_quant_bits(x, bits[k], mode, exact), pk);
      wq = wq.defined() ? add(wq, wk) : wk;
      xq = xq.defined() ? add(xq, xk) : xk;
    }
    return std::make_pair(wq, xq);
  };

  Tensor logits = forward_with_hook(model, b.x, hook);
  Tensor ce = cross_entropy(logits, b.y);

  // Expected reward through the relaxation, differentiable in the probs.
  Tensor expected_R;
  for (std::size_t l = 0; l < probs.size(); ++l) {
    const auto bits = pool_bits(policy.agents[l].pool);
    for (std::size_t k = 0; k < bits.size(); ++k) {
      Tensor term = mul_scalar(take(probs[l], static_cast<std::int64_t>(k)),
                               static_cast<float>(reward_for_bits(counts_, l, bits[k])));
      expected_R = expected_R.defined() ? add(expected_R, term) : term;
    }
  }
  StepRecord rec;
  rec.stage = "soft";
  rec.loss = ce.item();
  rec.sum_R = expected_R.item();
  rec.J = rec.loss - cfg.alpha * rec.sum_R;
  rec.actions = argmax_bits;

  Tensor objective =
      cfg.alpha > 0.0
          ? sub(ce, mul_scalar(expected_R, static_cast<float>(cfg.alpha)))
          : ce;
  backward(objective);
  return rec;
}

StepRecord Trainer::step_hard(const Batch& b) {
  zero_grads(opt_.params);
  const bool exact = cfg.exact();
  const QuantMode mode = cfg.mode();
  std::vector<Tensor> log_probs(policy.agents.size());
  std::vector<int> actions(policy.agents.size(), 32);

  auto hook = [&](int layer, const Tensor& w, const Tensor& x) {
    const std::int64_t slot = per_layer_h_idx_[static_cast<std::size_t>(layer)];
    if (slot < 0) return std::make_pair(w, x);
    const Agent& agent = policy.agents[static_cast<std::size_t>(slot)];
    const double h = std::max(0.0, profile_.layers[static_cast<std::size_t>(slot)].trace);
    HardDecision d = decide_hard(agent, x, h, cfg.temperature, policy_rng_);
    log_probs[static_cast<std::size_t>(slot)] = d.log_prob;
    actions[static_cast<std::size_t>(slot)] = d.bits;
    return std::make_pair(fake_quant_bits(w, d.bits, mode, exact),
                          fake_quant_bits(x, d.bits, mode, exact));
  };

  Tensor logits = forward_with_hook(model, b.x, hook);
  Tensor ce = cross_entropy(logits, b.y);

  StepRecord rec;
  rec.stage = "hard";
  rec.loss = ce.item();
  const auto rew = compute_rewards(counts_, actions, cfg.alpha, rec.loss);
  rec.sum_R = rew.sum_R;
  rec.J = rec.loss - cfg.alpha * rec.sum_R;
  rec.actions = actions;

  const double L_eff = rec.J;
  const double advantage = L_eff - baseline_.get(L_eff);
  Tensor total = add(ce, score_objective(log_probs, advantage));
  backward(total);
  baseline_.update(L_eff);
  return rec;
}

double Trainer::subset_accuracy() {
  if (cfg.eval_samples < 1) return 0.0;
  const std::int64_t n = std::min<std::int64_t>(cfg.eval_samples, data.count());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  const Batch b = make_batch(idx);
  GradOff off;
  Tensor logits;
  if (cfg.pipeline == "plain") {
    logits = forward_plain(model, b.x);
  } else if (cfg.pipeline == "fixed") {
    std::vector<int> actions(static_cast<std::size_t>(model.num_quantizable()), cfg.fixed_bits);
    logits = forward_quantized(model, b.x, actions, cfg.mode(), cfg.exact());
  } else {
    const auto actions = policy_actions_argmax(model, policy, profile_, b.x,
                                               cfg.temperature, cfg.mode(), cfg.exact());
    logits = forward_quantized(model, b.x, actions, cfg.mode(), cfg.exact());
  }
  return accuracy_from_logits(logits, b.y);
}

std::vector<EpochRecord> Trainer::fit() {
  std::vector<EpochRecord> history;
  std::vector<std::int64_t> order(static_cast<std::size_t>(data.count()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.pipeline == "dqmq" && cfg.trace_refresh_every > 0 && epoch > 0 &&
        epoch % cfg.trace_refresh_every == 0) {
      refresh_profile(epoch);
    }
    data_rng_.shuffle(order);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = stage_for_epoch(epoch);
    rec.alpha = cfg.alpha;
    rec.lr = lr_for_epoch(epoch);

    std::vector<std::map<int, int>> action_counts(
        static_cast<std::size_t>(model.num_quantizable()));
    int steps = 0;
    for (std::int64_t start = 0; start < data.count(); start += cfg.batch_size) {
      const std::int64_t end = std::min<std::int64_t>(start + cfg.batch_size, data.count());
      const StepRecord s = train_step(
          std::span<const std::int64_t>(order.data() + start,
                                        static_cast<std::size_t>(end - start)),
          epoch);
      rec.mean_loss += s.loss;
      rec.mean_sum_R += s.sum_R;
      rec.mean_J += s.J;
      for (std::size_t l = 0; l < s.actions.size(); ++l) {
        action_counts[l][s.actions[l]]++;
      }
      ++steps;
    }
    rec.mean_loss /= steps;
    rec.mean_sum_R /= steps;
    rec.mean_J /= steps;
    for (auto& counts : action_counts) {
      int best_bits = 32, best_n = -1;
      for (const auto& [bits, n] : counts) {
        if (n > best_n) {
          best_n = n;
          best_bits = bits;
        }
      }
      rec.action_mode.push_back(best_bits);
    }
    rec.compression = compression_rate(counts_, rec.action_mode);
    rec.eval_accuracy = subset_accuracy();
    history.push_back(std::move(rec));
  }
  return history;
}

std::vector<EpochRecord> fixed_precision_baseline(Model& m, const Dataset& train,
                                                  TrainConfig cfg, int bits) {
  if (bits < 2 || bits > 32) {
    throw ContractError("fixed_precision_baseline: bits must lie in [2,32]");
  }
  cfg.pipeline = "fixed";
  cfg.fixed_bits = bits;
  PolicyState policy = build_policy(m, cfg.seed);
  Trainer t(m, policy, train, cfg);
  return t.fit();
}

}  // namespace dqmq
