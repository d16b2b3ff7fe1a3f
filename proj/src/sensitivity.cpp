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

#include "dqmq/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "dqmq/errors.hpp"
#include "dqmq/rng.hpp"

namespace dqmq {

namespace {

double max_abs(std::span<const float> v) {
  double m = 0.0;
  for (float x : v) m = std::max(m, static_cast<double>(std::abs(x)));
  return m;
}

void check_finite(std::span<const double> g, const char* what) {
  for (double x : g) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite gradient");
  }
}

/// Gathers/scatters the quantizable weight tensors as one flat vector.
struct FlatParams {
  std::vector<int> layer_idx;
  std::vector<std::int64_t> offsets;  // per layer, into the flat vector
  std::int64_t dim = 0;

  explicit FlatParams(const Model& m) {
    for (int i = 0; i < m.num_layers(); ++i) {
      if (!m.layers[static_cast<std::size_t>(i)].quantizable) continue;
      layer_idx.push_back(i);
      offsets.push_back(dim);
      dim += m.weights[static_cast<std::size_t>(i)].size();
    }
  }

  std::vector<float> gather(const Model& m) const {
    std::vector<float> out(static_cast<std::size_t>(dim));
    for (std::size_t k = 0; k < layer_idx.size(); ++k) {
      auto src = m.weights[static_cast<std::size_t>(layer_idx[k])].data();
      std::copy(src.begin(), src.end(), out.begin() + offsets[k]);
    }
    return out;
  }

  void scatter(Model& m, std::span<const float> flat) const {
    for (std::size_t k = 0; k < layer_idx.size(); ++k) {
      auto dst = m.weights[static_cast<std::size_t>(layer_idx[k])].mutable_data();
      std::copy(flat.begin() + offsets[k], flat.begin() + offsets[k] + static_cast<std::int64_t>(dst.size()),
                dst.begin());
    }
  }

  void gather_grad(Model& m, std::span<double> out) const {
    for (std::size_t k = 0; k < layer_idx.size(); ++k) {
      auto& w = m.weights[static_cast<std::size_t>(layer_idx[k])];
      if (!w.has_grad()) throw NumericError("FlatParams: layer missing gradient");
      auto g = w.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        out[static_cast<std::size_t>(offsets[k]) + i] = g[i];
      }
    }
  }
};

void zero_all_grads(Model& m) {
  for (Tensor* p : m.parameters()) p->zero_grad();
}

double batch_loss(const Model& m, const Batch& batch) {
  GradOff off;
  return cross_entropy(forward_plain(m, batch.x), batch.y).item();
}

void model_backward(Model& m, const Batch& batch) {
  zero_all_grads(m);
  Tensor loss = cross_entropy(forward_plain(m, batch.x), batch.y);
  backward(loss);
}

}  // namespace

std::span<const int> pool_bits(int pool) {
  if (pool < 0 || pool > 2) throw ContractError("pool_bits: pool must be 0, 1 or 2");
  return kPools[static_cast<std::size_t>(pool)];
}

nlohmann::json SensitivityProfile::to_json() const {
  nlohmann::json j;
  j["probes"] = probes;
  j["quality_tag"] = quality_tag;
  auto arr = nlohmann::json::array();
  for (const auto& l : layers) {
    arr.push_back({{"layer", l.layer}, {"trace", l.trace}, {"stderr", l.stderr_}, {"pool", l.pool}});
  }
  j["layers"] = std::move(arr);
  return j;
}

SensitivityProfile SensitivityProfile::from_json(const nlohmann::json& j) {
  SensitivityProfile p;
  p.probes = j.at("probes").get<int>();
  p.quality_tag = j.at("quality_tag").get<int>();
  for (const auto& e : j.at("layers")) {
    LayerTrace t;
    t.layer = e.at("layer").get<std::string>();
    t.trace = e.at("trace").get<double>();
    t.stderr_ = e.at("stderr").get<double>();
    t.pool = e.at("pool").get<int>();
    p.layers.push_back(std::move(t));
  }
  return p;
}

std::vector<double> hvp_fd(Tensor& theta, const GradFn& grad,
                           std::span<const double> v, double eps) {
  const auto n = static_cast<std::size_t>(theta.size());
  if (v.size() != n) {
    throw ContractError("hvp_fd: probe length " + std::to_string(v.size()) +
                        " does not match parameter count " + std::to_string(n));
  }
  if (!(eps > 0.0)) throw ContractError("hvp_fd: eps must be positive");

  auto data = theta.mutable_data();
  const std::vector<float> orig(data.begin(), data.end());
  const double e = eps * (1.0 + max_abs(data));

  std::vector<double> gp(n), gm(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<float>(orig[i] + e * v[i]);
  grad(gp);
  for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<float>(orig[i] - e * v[i]);
  grad(gm);
  std::copy(orig.begin(), orig.end(), data.begin());

  check_finite(gp, "hvp_fd");
  check_finite(gm, "hvp_fd");
  std::vector<double> hv(n);
  for (std::size_t i = 0; i < n; ++i) hv[i] = (gp[i] - gm[i]) / (2.0 * e);
  return hv;
}

TraceEstimate hutchinson_trace(Tensor& theta, const GradFn& grad, int probes,
                               std::uint64_t seed, double eps) {
  if (probes < 1) throw ContractError("hutchinson_trace: probes must be >= 1");
  const auto n = static_cast<std::size_t>(theta.size());
  Rng rng(seed);
  std::vector<double> v(n);
  double sum = 0.0, sumsq = 0.0;
  for (int p = 0; p < probes; ++p) {
    for (auto& x : v) x = static_cast<double>(rng.rademacher());
    const auto hv = hvp_fd(theta, grad, v, eps);
    double est = 0.0;
    for (std::size_t i = 0; i < n; ++i) est += v[i] * hv[i];
    sum += est;
    sumsq += est * est;
  }
  TraceEstimate out;
  out.trace = sum / probes;
  if (probes > 1) {
    const double var = std::max(0.0, (sumsq - sum * sum / probes) / (probes - 1));
    out.stderr_ = std::sqrt(var / probes);
  } else {
    out.stderr_ = std::abs(out.trace);  // single probe: no variance information
  }
  return out;
}

GradFn model_layer_gradfn(Model& m, const Batch& batch, int layer_idx) {
  if (layer_idx < 0 || layer_idx >= m.num_layers()) {
    throw ContractError("model_layer_gradfn: layer index out of range");
  }
  return [&m, &batch, layer_idx](std::span<double> out) {
    model_backward(m, batch);
    auto g = m.weights[static_cast<std::size_t>(layer_idx)].grad();
    if (g.size() != out.size()) throw ContractError("model_layer_gradfn: size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i];
  };
}

TraceEstimate layer_trace(Model& m, const Batch& batch, int layer_idx,
                          int probes, std::uint64_t seed, double eps) {
  auto grad = model_layer_gradfn(m, batch, layer_idx);
  return hutchinson_trace(m.weights[static_cast<std::size_t>(layer_idx)], grad, probes, seed, eps);
}

SensitivityProfile profile_model(Model& m, const Batch& batch, int probes,
                                 std::uint64_t seed, int quality_tag, double eps) {
  SensitivityProfile prof;
  prof.probes = probes;
  prof.quality_tag = quality_tag;
  std::vector<double> traces;
  int q = 0;
  for (int i = 0; i < m.num_layers(); ++i) {
    if (!m.layers[static_cast<std::size_t>(i)].quantizable) continue;
    const std::uint64_t layer_seed = seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(q + 1));
    const auto est = layer_trace(m, batch, i, probes, layer_seed, eps);
    // Stored per weight, not summed over the block: the raw block trace grows
    // with layer size, which would rank wide layers as sensitive regardless of
    // their curvature.
    const auto n = static_cast<double>(m.weights[static_cast<std::size_t>(i)].size());
    LayerTrace t;
    t.layer = m.layers[static_cast<std::size_t>(i)].name;
    t.trace = est.trace / n;
    t.stderr_ = est.stderr_ / n;
    prof.layers.push_back(std::move(t));
    traces.push_back(t.trace);
    ++q;
  }
  const auto pools = assign_pools(traces);
  for (std::size_t i = 0; i < pools.size(); ++i) prof.layers[i].pool = pools[i];
  return prof;
}

std::vector<int> assign_pools(std::span<const double> traces) {
  const auto L = traces.size();
  std::vector<double> t(traces.begin(), traces.end());
  for (auto& x : t) {
    if (!std::isfinite(x)) throw ContractError("assign_pools: non-finite trace");
    if (x < 0.0) {
      std::cerr << "assign_pools: clamping negative trace estimate " << x << " to 0\n";
      x = 0.0;
    }
  }
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), 0);
  // Ascending by trace; on ties the earlier layer sorts later, so it falls
  // into the higher pool.
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (t[a] != t[b]) return t[a] < t[b];
    return a > b;
  });
  const std::size_t n_low = L / 3;
  const std::size_t n_high = (L + 2) / 3;
  std::vector<int> pools(L, kPoolMid);
  for (std::size_t r = 0; r < L; ++r) {
    if (r < n_low) {
      pools[order[r]] = kPoolLow;
    } else if (r >= L - n_high) {
      pools[order[r]] = kPoolHigh;
    } else {
      pools[order[r]] = kPoolMid;
    }
  }
  return pools;
}

std::vector<std::pair<double, double>> perturbation_sweep(
    Model& m, const Batch& batch, std::span<const double> traces,
    std::span<const double> amplitudes, SweepDirection dir, std::uint64_t seed,
    int power_iters, double eps) {
  if (std::find(amplitudes.begin(), amplitudes.end(), 0.0) == amplitudes.end()) {
    throw ContractError("perturbation_sweep: amplitudes must include 0");
  }
  FlatParams flat(m);
  const std::vector<float> theta0 = flat.gather(m);
  Rng rng(seed);

  // Direction over all quantizable weights, unit norm.
  std::vector<double> d(static_cast<std::size_t>(flat.dim));
  if (dir == SweepDirection::trace_weighted) {
    if (traces.size() != flat.layer_idx.size()) {
      throw ContractError("perturbation_sweep: need one trace per quantizable layer");
    }
    for (std::size_t k = 0; k < flat.layer_idx.size(); ++k) {
      const double w = std::sqrt(std::max(traces[k], 0.0));
      const std::int64_t len = m.weights[static_cast<std::size_t>(flat.layer_idx[k])].size();
      for (std::int64_t i = 0; i < len; ++i) {
        d[static_cast<std::size_t>(flat.offsets[k] + i)] = w * rng.normal();
      }
    }
  } else {
    for (auto& x : d) x = rng.normal();
    // Power iteration on the finite-difference Hessian of the batch loss.
    const double e_base = eps * (1.0 + max_abs(theta0));
    std::vector<float> pert(theta0.size());
    std::vector<double> gp(d.size()), gm(d.size());
    auto full_grad = [&](std::span<double> out) {
      model_backward(m, batch);
      flat.gather_grad(m, out);
    };
    for (int it = 0; it < power_iters; ++it) {
      double norm = 0.0;
      for (double x : d) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0.0) throw NumericError("perturbation_sweep: degenerate direction");
      for (auto& x : d) x /= norm;
      for (std::size_t i = 0; i < d.size(); ++i) pert[i] = static_cast<float>(theta0[i] + e_base * d[i]);
      flat.scatter(m, pert);
      full_grad(gp);
      for (std::size_t i = 0; i < d.size(); ++i) pert[i] = static_cast<float>(theta0[i] - e_base * d[i]);
      flat.scatter(m, pert);
      full_grad(gm);
      double hnorm = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = (gp[i] - gm[i]) / (2.0 * e_base);
        hnorm += d[i] * d[i];
      }
      if (hnorm < 1e-30) break;  // flat curvature, keep the last direction
    }
    flat.scatter(m, theta0);
  }
  double norm = 0.0;
  for (double x : d) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw NumericError("perturbation_sweep: zero direction");
  for (auto& x : d) x /= norm;

  std::vector<std::pair<double, double>> out;
  std::vector<float> pert(theta0.size());
  for (double t : amplitudes) {
    if (t == 0.0) {
      flat.scatter(m, theta0);
    } else {
      for (std::size_t i = 0; i < pert.size(); ++i) {
        pert[i] = static_cast<float>(theta0[i] + t * d[i]);
      }
      flat.scatter(m, pert);
    }
    out.emplace_back(t, batch_loss(m, batch));
  }
  flat.scatter(m, theta0);
  return out;
}

}  // namespace dqmq
