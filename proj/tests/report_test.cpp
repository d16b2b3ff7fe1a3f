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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "doctest.h"
#include "dqmq/report.hpp"
#include "helpers.hpp"

using namespace dqmq;

namespace {

struct Fixture {
  Model model;
  PolicyState policy;
  SensitivityProfile profile;
  Dataset data;
};

Fixture make_fixture(int classes = 4, int per_level = 20, std::uint64_t seed = 11) {
  TopologyConfig topo;
  topo.width = 2;
  topo.classes = classes;
  topo.input_channels = 3;
  topo.seed = seed;
  Fixture f;
  f.model = build_backbone(topo);
  f.policy = build_policy(f.model, seed + 1);
  Dataset base = synth_dataset(classes, per_level * kQualityLevels / classes + 4,
                               seed + 2, 8);
  f.data = build_mixed(base, per_level, seed + 3);
  Batch probe;
  {
    const std::int64_t n = 16;
    std::vector<float> x;
    for (std::int64_t i = 0; i < n; ++i) {
      auto img = f.data.image(i);
      x.insert(x.end(), img.begin(), img.end());
      probe.y.push_back(f.data.labels[static_cast<std::size_t>(i)]);
    }
    probe.x = Tensor::from_data({16, 3, 8, 8}, std::move(x));
  }
  f.profile = profile_model(f.model, probe, 1, seed + 4, 0);
  for (std::size_t l = 0; l < f.policy.agents.size(); ++l) {
    f.policy.agents[l].pool = f.profile.layers[l].pool;
  }
  return f;
}

/// Relabels every sample with the model's own prediction.
void relabel_with_predictions(const Model& m, Dataset& ds) {
  GradOff off;
  const std::int64_t isz = ds.image_size();
  for (std::int64_t i = 0; i < ds.count(); ++i) {
    auto img = ds.image(i);
    Tensor x = Tensor::from_data({1, ds.channels, ds.height, ds.width},
                                 {img.begin(), img.end()});
    const Tensor logits = forward_plain(m, x);
    auto v = logits.data();
    std::int64_t best = 0;
    for (std::int64_t k = 1; k < logits.shape()[1]; ++k) {
      if (v[static_cast<std::size_t>(k)] > v[static_cast<std::size_t>(best)]) best = k;
    }
    ds.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    (void)isz;
  }
}

}  // namespace

TEST_CASE("accuracy_from_logits counts argmax hits") {
  Tensor logits = Tensor::from_data({3, 2}, {0.1f, 0.9f, 2.0f, -1.0f, 0.5f, 0.5f});
  std::vector<int> y = {1, 0, 1};  // ties resolve to the first index
  CHECK(accuracy_from_logits(logits, y) == doctest::Approx(100.0 * 2 / 3));
  std::vector<int> wrong_len = {1, 0};
  CHECK_THROWS_AS(accuracy_from_logits(logits, wrong_len), DimensionError);
}

TEST_CASE("compression rate arithmetic") {
  std::vector<std::int64_t> counts = {100, 100};
  CHECK(compression_rate(counts, std::vector<int>{8, 8}) == doctest::Approx(4.0));
  CHECK(compression_rate(counts, std::vector<int>{4, 8}) == doctest::Approx(32.0 / 6.0));
  CHECK(compression_rate(counts, std::vector<int>{32, 32}) == doctest::Approx(1.0));

  // Pruned layers drop out of the denominator entirely.
  CHECK(compression_rate(counts, std::vector<int>{0, 8}) ==
        doctest::Approx(6400.0 / 800.0));

  CHECK_THROWS_WITH_AS(compression_rate(counts, std::vector<int>{0, 0}),
                       "compression_rate: every layer pruned, compression undefined",
                       ContractError);
  try {
    compression_rate(counts, std::vector<int>{8, 33});
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
  CHECK_THROWS_AS(compression_rate(counts, std::vector<int>{8}), ContractError);
}

TEST_CASE("evaluate scores an oracle-labelled dataset at 100 percent") {
  Fixture f = make_fixture();
  relabel_with_predictions(f.model, f.data);
  EvalOptions opt;
  opt.mode = "fixed";
  opt.fixed_bits = 32;
  opt.exact = true;
  opt.batch = 16;
  const EvalReport rep = evaluate(f.model, f.policy, f.profile, f.data, opt);
  CHECK(rep.overall_accuracy == doctest::Approx(100.0));
  REQUIRE(rep.level_accuracy.size() == 5);
  for (const auto& [lvl, acc] : rep.level_accuracy) {
    CHECK(acc == doctest::Approx(100.0));
    CHECK(rep.level_counts.at(lvl) == 20);
  }
  CHECK(rep.compression == doctest::Approx(1.0));
  CHECK(rep.weight_bits_quant == rep.weight_bits_full);
}

TEST_CASE("evaluate at chance: random weights land near uniform accuracy") {
  TopologyConfig topo;
  topo.width = 2;
  topo.classes = 10;
  topo.input_channels = 3;
  topo.seed = 99;
  Model m = build_backbone(topo);
  PolicyState policy = build_policy(m, 1);
  Dataset base = synth_dataset(10, 110, 21, 8);
  Dataset mixed = build_mixed(base, 100, 22);
  Batch probe;
  {
    std::vector<float> x;
    for (std::int64_t i = 0; i < 16; ++i) {
      auto img = mixed.image(i);
      x.insert(x.end(), img.begin(), img.end());
      probe.y.push_back(mixed.labels[static_cast<std::size_t>(i)]);
    }
    probe.x = Tensor::from_data({16, 3, 8, 8}, std::move(x));
  }
  SensitivityProfile prof = profile_model(m, probe, 1, 5, 0);
  EvalOptions opt;
  opt.mode = "fixed";
  opt.fixed_bits = 32;
  opt.exact = true;
  opt.batch = 100;
  const EvalReport rep = evaluate(m, policy, prof, mixed, opt);
  CHECK(rep.overall_accuracy > 8.0);
  CHECK(rep.overall_accuracy < 12.0);
}

TEST_CASE("overall accuracy is the sample-weighted mean of level accuracies") {
  Fixture f = make_fixture();
  EvalOptions opt;
  opt.mode = "fixed";
  opt.fixed_bits = 8;
  opt.batch = 16;
  const EvalReport rep = evaluate(f.model, f.policy, f.profile, f.data, opt);
  double weighted = 0.0;
  std::int64_t total = 0;
  for (const auto& [lvl, acc] : rep.level_accuracy) {
    weighted += acc * static_cast<double>(rep.level_counts.at(lvl));
    total += rep.level_counts.at(lvl);
  }
  CHECK(total == f.data.count());
  CHECK(rep.overall_accuracy == doctest::Approx(weighted / static_cast<double>(total)));
}

TEST_CASE("policy-mode evaluation is deterministic and self-consistent") {
  Fixture f = make_fixture();
  EvalOptions opt;
  opt.mode = "policy";
  opt.batch = 10;
  const EvalReport a = evaluate(f.model, f.policy, f.profile, f.data, opt);
  const EvalReport b = evaluate(f.model, f.policy, f.profile, f.data, opt);
  CHECK(a.to_json().dump() == b.to_json().dump());

  REQUIRE(a.modal_actions.size() == 9);
  std::int64_t batches = 0;
  for (const auto& [bits, n] : a.bit_histogram[0]) {
    (void)bits;
    batches += n;
  }
  CHECK(batches == 10);  // 100 samples in batches of 10
  for (std::size_t l = 0; l < a.bit_histogram.size(); ++l) {
    const auto pool = pool_bits(f.policy.agents[l].pool);
    for (const auto& [bits, n] : a.bit_histogram[l]) {
      (void)n;
      CHECK(std::find(pool.begin(), pool.end(), bits) != pool.end());
    }
  }
  CHECK(a.policy_params > 0);
  CHECK(a.weight_mb_full ==
        doctest::Approx(static_cast<double>(a.weight_bits_full) / (8.0 * 1024 * 1024)));
  CHECK(a.compression > 0.0);

  EvalOptions bad = opt;
  bad.mode = "sampled";
  CHECK_THROWS_AS(evaluate(f.model, f.policy, f.profile, f.data, bad), ConfigError);
}

TEST_CASE("spearman handles monotone, reversed, and tied series") {
  std::vector<double> a = {1, 2, 3, 4, 5};
  std::vector<double> up = {10, 20, 30, 40, 50};
  std::vector<double> down = {5, 4, 3, 2, 1};
  CHECK(spearman(a, up) == doctest::Approx(1.0));
  CHECK(spearman(a, down) == doctest::Approx(-1.0));

  // Average ranks on ties: a = {1,2,2,3} ranks to {1, 2.5, 2.5, 4}.
  std::vector<double> tied = {1, 2, 2, 3};
  std::vector<double> plain = {1, 2, 3, 4};
  CHECK(spearman(tied, plain) == doctest::Approx(4.5 / std::sqrt(22.5)));

  // Rank statistic: invariant under positive scaling of one series.
  std::vector<double> noisy = {0.3, -1.2, 2.0, 0.9, 1.1};
  std::vector<double> scaled = noisy;
  for (auto& v : scaled) v *= 137.5;
  CHECK(spearman(a, noisy) == doctest::Approx(spearman(a, scaled)));

  std::vector<double> flat = {2, 2, 2, 2, 2};
  CHECK_THROWS_AS(spearman(a, flat), NumericError);
  std::vector<double> one = {1.0};
  CHECK_THROWS_AS(spearman(one, one), ContractError);
  std::vector<double> four = {1, 2, 3, 4};
  CHECK_THROWS_AS(spearman(a, four), ContractError);
}

TEST_CASE("sensitivity_vs_quality table shape and self-consistency") {
  Fixture f = make_fixture();
  std::vector<int> levels = {2, 2, 5};
  SensitivityQualityTable t =
      sensitivity_vs_quality(f.model, f.data, levels, 2, 31, 16);
  REQUIRE(t.levels == levels);
  REQUIRE(t.layer_names.size() == 9);
  REQUIRE(t.traces.size() == 3);
  REQUIRE(t.stderrs.size() == 3);
  CHECK(t.traces[0].size() == 9);
  REQUIRE(t.rho.size() == 3);
  CHECK(t.rho[0][0] == doctest::Approx(1.0));
  CHECK(t.rho[0][1] == doctest::Approx(t.rho[1][0]));

  // Same level, same batch, shared probe seed: identical traces.
  CHECK(t.traces[0] == t.traces[1]);
  CHECK(t.rho[0][1] == doctest::Approx(1.0));

  std::vector<int> none;
  CHECK_THROWS_AS(sensitivity_vs_quality(f.model, f.data, none, 2, 31, 16),
                  ContractError);
}

TEST_CASE("csv emitters are schema-stable and byte-identical on re-run") {
  testing::TmpDir tmp("report");

  std::vector<SweepCurve> curves(2);
  curves[0].quality_level = 2;
  curves[0].points = {{0.0, 2.3}, {0.01, 2.4}};
  curves[1].quality_level = 5;
  curves[1].points = {{0.0, 2.5}};
  const std::string sweep_path = (tmp.path() / "sweep.csv").string();
  emit_sweep_csv(curves, sweep_path);
  const std::string first = testing::slurp_text(sweep_path);
  emit_sweep_csv(curves, sweep_path);
  CHECK(first == testing::slurp_text(sweep_path));
  CHECK(first.rfind("quality_level,amplitude,loss\n", 0) == 0);
  CHECK(std::count(first.begin(), first.end(), '\n') == 4);

  Fixture f = make_fixture();
  EvalOptions opt;
  opt.mode = "policy";
  opt.batch = 25;
  const EvalReport rep = evaluate(f.model, f.policy, f.profile, f.data, opt);
  std::vector<int> pools;
  for (const auto& a : f.policy.agents) pools.push_back(a.pool);
  const std::string hist_path = (tmp.path() / "hist.csv").string();
  emit_decision_histogram_csv(rep, pools, hist_path);
  const std::string hist = testing::slurp_text(hist_path);
  CHECK(hist.rfind("layer,bits,count\n", 0) == 0);
  CHECK(std::count(hist.begin(), hist.end(), '\n') == 1 + 9 * 3);
  std::vector<int> short_pools(pools.begin(), pools.end() - 1);
  CHECK_THROWS_AS(emit_decision_histogram_csv(rep, short_pools, hist_path),
                  ContractError);

  std::vector<int> levels = {2, 5};
  SensitivityQualityTable t =
      sensitivity_vs_quality(f.model, f.data, levels, 1, 31, 16);
  const std::string sens_path = (tmp.path() / "sens.csv").string();
  emit_sensitivity_csv(t, sens_path);
  const std::string sens = testing::slurp_text(sens_path);
  CHECK(sens.rfind("level,layer,trace,stderr\n", 0) == 0);
  CHECK(std::count(sens.begin(), sens.end(), '\n') == 1 + 2 * 9);

  const std::string corr_path = (tmp.path() / "corr.csv").string();
  emit_correlation_csv(t, corr_path);
  const std::string corr = testing::slurp_text(corr_path);
  CHECK(corr.rfind("level_a,level_b,rho\n", 0) == 0);
  CHECK(std::count(corr.begin(), corr.end(), '\n') == 1 + 3);  // upper triangle

  CHECK_THROWS_AS(emit_sweep_csv(curves, (tmp.path() / "no" / "dir.csv").string()),
                  IoError);
}
