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

#include "dqmq/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "dqmq/errors.hpp"

namespace dqmq {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::ofstream open_csv(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  return f;
}

Batch batch_from(const Dataset& ds, std::int64_t offset, std::int64_t n) {
  const std::int64_t isz = ds.image_size();
  std::vector<float> x(static_cast<std::size_t>(n * isz));
  Batch b;
  b.y.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    auto img = ds.image(offset + i);
    std::copy(img.begin(), img.end(), x.begin() + i * isz);
    b.y.push_back(ds.labels[static_cast<std::size_t>(offset + i)]);
  }
  b.x = Tensor::from_data({static_cast<int>(n), ds.channels, ds.height, ds.width},
                          std::move(x));
  return b;
}

}  // namespace

double accuracy_from_logits(const Tensor& logits, std::span<const int> y) {
  if (logits.ndim() != 2) throw DimensionError("accuracy: logits must be 2-D");
  const std::int64_t n = logits.shape()[0];
  const std::int64_t c = logits.shape()[1];
  if (n != static_cast<std::int64_t>(y.size())) {
    throw DimensionError("accuracy: logits rows and label count differ");
  }
  auto v = logits.data();
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t k = 1; k < c; ++k) {
      if (v[static_cast<std::size_t>(i * c + k)] > v[static_cast<std::size_t>(i * c + best)]) {
        best = k;
      }
    }
    if (best == y[static_cast<std::size_t>(i)]) ++correct;
  }
  return n > 0 ? 100.0 * static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

double compression_rate(std::span<const std::int64_t> param_counts,
                        std::span<const int> actions) {
  if (param_counts.size() != actions.size()) {
    throw ContractError("compression_rate: " + std::to_string(param_counts.size()) +
                        " layers vs " + std::to_string(actions.size()) + " actions");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t l = 0; l < actions.size(); ++l) {
    if (actions[l] < 0 || actions[l] > 32) {
      throw ContractError("compression_rate: bits " + std::to_string(actions[l]) +
                          " outside [0,32] at layer " + std::to_string(l));
    }
    num += 32.0 * static_cast<double>(param_counts[l]);
    den += static_cast<double>(actions[l]) * static_cast<double>(param_counts[l]);
  }
  if (den == 0.0) {
    throw ContractError("compression_rate: every layer pruned, compression undefined");
  }
  return num / den;
}

std::vector<int> policy_actions_argmax(const Model& m, const PolicyState& policy,
                                       const SensitivityProfile& profile,
                                       const Tensor& x, double temperature,
                                       QuantMode mode, bool exact) {
  if (policy.agents.size() != profile.layers.size()) {
    throw ContractError("policy_actions_argmax: profile covers " +
                        std::to_string(profile.layers.size()) + " layers, policy has " +
                        std::to_string(policy.agents.size()) + " agents");
  }
  GradOff off;
  std::vector<int> actions(policy.agents.size(), 32);
  std::int64_t slot = 0;
  auto hook = [&](int layer, const Tensor& w, const Tensor& xin) {
    (void)layer;
    const Agent& agent = policy.agents[static_cast<std::size_t>(slot)];
    const double h = std::max(0.0, profile.layers[static_cast<std::size_t>(slot)].trace);
    Tensor p = decide_soft(agent, xin, h, temperature);
    auto pv = p.data();
    const auto bits = pool_bits(agent.pool);
    const int b = bits[static_cast<std::size_t>(
        std::max_element(pv.begin(), pv.end()) - pv.begin())];
    actions[static_cast<std::size_t>(slot)] = b;
    ++slot;
    return std::make_pair(fake_quant_bits(w, b, mode, exact),
                          fake_quant_bits(xin, b, mode, exact));
  };
  forward_with_hook(m, x, hook);
  return actions;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json levels = nlohmann::json::object();
  for (const auto& [lvl, acc] : level_accuracy) {
    levels[std::to_string(lvl)] = {{"accuracy", acc},
                                   {"count", level_counts.at(lvl)}};
  }
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& layer_hist : bit_histogram) {
    nlohmann::json h = nlohmann::json::object();
    for (const auto& [bits, n] : layer_hist) h[std::to_string(bits)] = n;
    hist.push_back(std::move(h));
  }
  return {{"mode", mode},
          {"fixed_bits", fixed_bits},
          {"overall_accuracy", overall_accuracy},
          {"levels", levels},
          {"modal_actions", modal_actions},
          {"bit_histogram", hist},
          {"compression", compression},
          {"weight_bits_full", weight_bits_full},
          {"weight_bits_quant", weight_bits_quant},
          {"weight_mb_full", weight_mb_full},
          {"weight_mb_quant", weight_mb_quant},
          {"policy_params", policy_params}};
}

EvalReport evaluate(const Model& m, const PolicyState& policy,
                    const SensitivityProfile& profile, const Dataset& ds,
                    const EvalOptions& opt) {
  if (opt.mode != "policy" && opt.mode != "fixed") {
    throw ConfigError("evaluate: mode must be 'policy' or 'fixed'");
  }
  if (opt.batch < 1) throw ConfigError("evaluate: batch must be >= 1");
  if (ds.count() == 0) throw ContractError("evaluate: empty dataset");

  const auto counts = m.quantizable_param_counts();
  const int nq = m.num_quantizable();

  EvalReport rep;
  rep.mode = opt.mode;
  rep.fixed_bits = opt.mode == "fixed" ? opt.fixed_bits : 0;
  rep.bit_histogram.assign(static_cast<std::size_t>(nq), {});

  std::set<int> level_set(ds.levels.begin(), ds.levels.end());
  std::int64_t total_correct = 0;
  GradOff off;
  for (int lvl : level_set) {
    const Dataset sub = subset_by_level(ds, lvl);
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < sub.count(); start += opt.batch) {
      const std::int64_t n = std::min<std::int64_t>(opt.batch, sub.count() - start);
      const Batch b = batch_from(sub, start, n);
      std::vector<int> actions;
      if (opt.mode == "policy") {
        actions = policy_actions_argmax(m, policy, profile, b.x, opt.temperature,
                                        opt.quant_mode, opt.exact);
      } else {
        actions.assign(static_cast<std::size_t>(nq), opt.fixed_bits);
      }
      for (std::size_t l = 0; l < actions.size(); ++l) {
        rep.bit_histogram[l][actions[l]]++;
      }
      const Tensor logits = forward_quantized(m, b.x, actions, opt.quant_mode, opt.exact);
      auto v = logits.data();
      const std::int64_t c = logits.shape()[1];
      for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t best = 0;
        for (std::int64_t k = 1; k < c; ++k) {
          if (v[static_cast<std::size_t>(i * c + k)] >
              v[static_cast<std::size_t>(i * c + best)]) {
            best = k;
          }
        }
        if (best == b.y[static_cast<std::size_t>(i)]) ++correct;
      }
    }
    rep.level_counts[lvl] = sub.count();
    rep.level_accuracy[lvl] =
        100.0 * static_cast<double>(correct) / static_cast<double>(sub.count());
    total_correct += correct;
  }
  rep.overall_accuracy =
      100.0 * static_cast<double>(total_correct) / static_cast<double>(ds.count());

  for (int l = 0; l < nq; ++l) {
    int best_bits = 32, best_n = -1;
    for (const auto& [bits, n] : rep.bit_histogram[static_cast<std::size_t>(l)]) {
      if (n > best_n) {
        best_n = n;
        best_bits = bits;
      }
    }
    rep.modal_actions.push_back(best_bits);
  }
  rep.compression = compression_rate(counts, rep.modal_actions);
  for (std::size_t l = 0; l < counts.size(); ++l) {
    rep.weight_bits_full += counts[l] * 32;
    rep.weight_bits_quant += counts[l] * rep.modal_actions[l];
  }
  rep.weight_mb_full = static_cast<double>(rep.weight_bits_full) / (8.0 * 1024 * 1024);
  rep.weight_mb_quant = static_cast<double>(rep.weight_bits_quant) / (8.0 * 1024 * 1024);
  for (const Agent& a : policy.agents) {
    rep.policy_params += a.w1.size() + a.b1.size() + a.w2.size() + a.b2.size() +
                         a.w3.size() + a.b3.size() + a.w4.size() + a.b4.size();
  }
  return rep;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw ContractError("spearman: need two equal-length series of size >= 2");
  }
  auto ranks = [](std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) {
    throw NumericError("spearman: a series is constant, correlation undefined");
  }
  return sab / std::sqrt(saa * sbb);
}

nlohmann::json SensitivityQualityTable::to_json() const {
  return {{"levels", levels},
          {"layers", layer_names},
          {"traces", traces},
          {"stderr", stderrs},
          {"rho", rho}};
}

SensitivityQualityTable sensitivity_vs_quality(Model& m, const Dataset& ds,
                                               std::span<const int> levels,
                                               int probes, std::uint64_t seed,
                                               int batch, double eps) {
  if (levels.empty()) throw ContractError("sensitivity_vs_quality: no levels given");
  SensitivityQualityTable t;
  t.levels.assign(levels.begin(), levels.end());
  for (int lvl : levels) {
    const Dataset sub = subset_by_level(ds, lvl);
    if (sub.count() == 0) {
      throw ContractError("sensitivity_vs_quality: no samples at level " +
                          std::to_string(lvl));
    }
    const std::int64_t n = std::min<std::int64_t>(batch, sub.count());
    const Batch b = batch_from(sub, 0, n);
    // Same seed at every level: probe noise is shared, so rank differences
    // come from the data alone.
    const SensitivityProfile prof = profile_model(m, b, probes, seed, lvl, eps);
    if (t.layer_names.empty()) {
      for (const auto& lt : prof.layers) t.layer_names.push_back(lt.layer);
    }
    std::vector<double> tr, se;
    for (const auto& lt : prof.layers) {
      tr.push_back(lt.trace);
      se.push_back(lt.stderr_);
    }
    t.traces.push_back(std::move(tr));
    t.stderrs.push_back(std::move(se));
  }
  const std::size_t L = t.levels.size();
  t.rho.assign(L, std::vector<double>(L, 1.0));
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = i + 1; j < L; ++j) {
      const double r = spearman(t.traces[i], t.traces[j]);
      t.rho[i][j] = r;
      t.rho[j][i] = r;
    }
  }
  return t;
}

void emit_sweep_csv(std::span<const SweepCurve> curves, const std::string& path) {
  auto f = open_csv(path);
  f << "quality_level,amplitude,loss\n";
  for (const auto& c : curves) {
    for (const auto& [amp, loss] : c.points) {
      f << c.quality_level << ',' << fmt(amp) << ',' << fmt(loss) << '\n';
    }
  }
  if (!f) throw IoError("write failed for '" + path + "'");
}

void emit_decision_histogram_csv(const EvalReport& report,
                                 std::span<const int> pools,
                                 const std::string& path) {
  if (pools.size() != report.bit_histogram.size()) {
    throw ContractError("decision histogram: pool list does not match layer count");
  }
  auto f = open_csv(path);
  f << "layer,bits,count\n";
  for (std::size_t l = 0; l < pools.size(); ++l) {
    for (int b : pool_bits(pools[l])) {
      const auto& h = report.bit_histogram[l];
      const auto it = h.find(b);
      f << l << ',' << b << ',' << (it == h.end() ? 0 : it->second) << '\n';
    }
  }
  if (!f) throw IoError("write failed for '" + path + "'");
}

void emit_sensitivity_csv(const SensitivityQualityTable& table,
                          const std::string& path) {
  auto f = open_csv(path);
  f << "level,layer,trace,stderr\n";
  for (std::size_t i = 0; i < table.levels.size(); ++i) {
    for (std::size_t l = 0; l < table.layer_names.size(); ++l) {
      f << table.levels[i] << ',' << table.layer_names[l] << ','
        << fmt(table.traces[i][l]) << ',' << fmt(table.stderrs[i][l]) << '\n';
    }
  }
  if (!f) throw IoError("write failed for '" + path + "'");
}

void emit_correlation_csv(const SensitivityQualityTable& table,
                          const std::string& path) {
  auto f = open_csv(path);
  f << "level_a,level_b,rho\n";
  for (std::size_t i = 0; i < table.levels.size(); ++i) {
    for (std::size_t j = i; j < table.levels.size(); ++j) {
      f << table.levels[i] << ',' << table.levels[j] << ',' << fmt(table.rho[i][j])
        << '\n';
    }
  }
  if (!f) throw IoError("write failed for '" + path + "'");
}

}  // namespace dqmq
