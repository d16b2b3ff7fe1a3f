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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dqmq/dataquality.hpp"
#include "dqmq/deploysim.hpp"
#include "dqmq/errors.hpp"
#include "dqmq/model.hpp"
#include "dqmq/policy.hpp"
#include "dqmq/report.hpp"
#include "dqmq/sensitivity.hpp"
#include "dqmq/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw dqmq::IoError("cannot open '" + path + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw dqmq::ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw dqmq::IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw dqmq::IoError("write failed for '" + path + "'");
}

std::vector<int> levels_in(const dqmq::Dataset& ds) {
  std::set<int> s(ds.levels.begin(), ds.levels.end());
  return {s.begin(), s.end()};
}

struct TrainMeta {
  dqmq::QuantMode mode = dqmq::QuantMode::symmetric;
  bool exact = false;
};

TrainMeta quant_settings(const dqmq::CheckpointData& c) {
  TrainMeta t;
  if (c.meta.contains("train_config")) {
    const auto& tc = c.meta["train_config"];
    if (tc.value("quant_mode", "symmetric") == std::string("affine")) {
      t.mode = dqmq::QuantMode::affine;
    }
    t.exact = tc.value("quantizer", "fake") == std::string("exact");
  }
  return t;
}

dqmq::SensitivityProfile profile_of(const dqmq::CheckpointData& c) {
  if (!c.meta.contains("profile")) {
    throw dqmq::FormatError("policy checkpoint carries no sensitivity profile");
  }
  return dqmq::SensitivityProfile::from_json(c.meta["profile"]);
}

int cmd_prepare_data(const std::string& base, int per_level, int classes, int per_class,
                     int size, std::uint64_t seed, const std::string& out) {
  dqmq::Dataset src;
  if (base == "synth") {
    const int k = classes;
    const int pc = per_class > 0 ? per_class
                                 : (per_level % k == 0 ? per_level / k * dqmq::kQualityLevels
                                                       : per_level);
    src = dqmq::synth_dataset(k, pc, seed, size);
  } else {
    src = dqmq::load_cifar_binary(base);
  }
  const dqmq::Dataset mixed = dqmq::build_mixed(src, per_level, seed);
  fs::create_directories(out);
  dqmq::save_dataset(mixed, out);
  std::cout << "wrote " << mixed.count() << " samples (" << per_level << " per level, "
            << src.num_classes() << " classes) to " << out << "\n";
  return 0;
}

int cmd_sensitivity(const std::string& model_path, const std::string& data_dir, int probes,
                    int batch, std::uint64_t seed, double eps, const std::string& out_csv,
                    const std::string& rho_csv, const std::string& out_json) {
  dqmq::Model m = dqmq::model_from_checkpoint(dqmq::load_checkpoint(model_path));
  const dqmq::Dataset ds = dqmq::load_dataset(data_dir);
  const auto levels = levels_in(ds);
  if (levels.empty()) throw dqmq::ConfigError("dataset in '" + data_dir + "' has no level tags");
  const auto table = dqmq::sensitivity_vs_quality(m, ds, levels, probes, seed, batch, eps);
  dqmq::emit_sensitivity_csv(table, out_csv);
  if (!rho_csv.empty()) dqmq::emit_correlation_csv(table, rho_csv);
  if (!out_json.empty()) write_text(out_json, table.to_json().dump(2) + "\n");
  std::cout << "traces for " << table.layer_names.size() << " layers at " << levels.size()
            << " levels -> " << out_csv << "\n";
  for (std::size_t i = 0; i < table.levels.size(); ++i) {
    for (std::size_t j = i + 1; j < table.levels.size(); ++j) {
      std::cout << "rho(level " << table.levels[i] << ", level " << table.levels[j]
                << ") = " << table.rho[i][j] << "\n";
    }
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
  dqmq::TrainConfig cfg = dqmq::TrainConfig::from_json(read_json_file(config_path));
  const dqmq::Dataset ds = dqmq::load_dataset(data_dir);
  cfg.topology.input_channels = ds.channels;
  cfg.topology.classes = ds.num_classes();

  dqmq::Model model = dqmq::build_backbone(cfg.topology);
  dqmq::PolicyState policy = dqmq::build_policy(model, cfg.seed);
  dqmq::Trainer trainer(model, policy, ds, cfg);
  fs::create_directories(out_dir);

  std::vector<dqmq::EpochRecord> history;
  try {
    history = trainer.fit();
  } catch (const dqmq::Error& e) {
    // Leave the last usable masters on disk before the error surfaces.
    dqmq::CheckpointData ac = dqmq::checkpoint_from_model(model);
    ac.meta["train_config"] = cfg.to_json();
    ac.meta["aborted"] = e.what();
    dqmq::save_checkpoint(ac, out_dir + "/abort.ckpt");
    std::cerr << "training aborted, masters saved to " << out_dir << "/abort.ckpt\n";
    throw;
  }
  json hist = json::array();
  for (const auto& e : history) {
    hist.push_back(e.to_json());
    std::cout << "epoch " << e.epoch << " stage=" << e.stage << " loss=" << e.mean_loss
              << " acc=" << e.eval_accuracy << " comp=" << e.compression << "x\n";
  }
  write_text(out_dir + "/history.json",
             json{{"config", cfg.to_json()}, {"epochs", hist}}.dump(2) + "\n");

  dqmq::CheckpointData mc = dqmq::checkpoint_from_model(model);
  mc.meta["train_config"] = cfg.to_json();
  dqmq::save_checkpoint(mc, out_dir + "/model.ckpt");

  dqmq::CheckpointData pc;
  pc.meta["train_config"] = cfg.to_json();
  pc.meta["profile"] = trainer.profile().to_json();
  pc.meta["topology"] = mc.meta["topology"];
  dqmq::append_policy_tensors(policy, pc);
  dqmq::save_checkpoint(pc, out_dir + "/policy.ckpt");
  std::cout << "checkpoints and history in " << out_dir << "\n";
  return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& policy_path,
                 const std::string& data_dir, const std::string& mode, int bits, int batch,
                 const std::string& out_json) {
  const auto mc = dqmq::load_checkpoint(model_path);
  dqmq::Model m = dqmq::model_from_checkpoint(mc);
  const auto pc = dqmq::load_checkpoint(policy_path);
  dqmq::PolicyState policy = dqmq::policy_from_checkpoint(pc, m);
  const dqmq::SensitivityProfile profile = profile_of(pc);
  const dqmq::Dataset ds = dqmq::load_dataset(data_dir);

  dqmq::EvalOptions opt;
  opt.mode = mode;
  opt.fixed_bits = bits;
  opt.batch = batch;
  const TrainMeta tm = quant_settings(pc);
  opt.quant_mode = tm.mode;
  opt.exact = tm.exact;
  opt.temperature = policy.temperature;

  const dqmq::EvalReport rep = dqmq::evaluate(m, policy, profile, ds, opt);
  write_text(out_json, rep.to_json().dump(2) + "\n");
  std::cout << "overall accuracy " << rep.overall_accuracy << "% compression "
            << rep.compression << "x -> " << out_json << "\n";
  for (const auto& [lvl, acc] : rep.level_accuracy) {
    std::cout << "  level " << lvl << ": " << acc << "%\n";
  }
  return 0;
}

int cmd_perturb_sweep(const std::string& model_path, const std::string& data_dir,
                      std::vector<double> amplitudes, const std::string& direction,
                      std::vector<int> levels, int probes, int batch, std::uint64_t seed,
                      const std::string& out_csv) {
  dqmq::Model m = dqmq::model_from_checkpoint(dqmq::load_checkpoint(model_path));
  const dqmq::Dataset ds = dqmq::load_dataset(data_dir);
  if (levels.empty()) levels = levels_in(ds);
  if (std::find(amplitudes.begin(), amplitudes.end(), 0.0) == amplitudes.end()) {
    amplitudes.push_back(0.0);
  }
  std::sort(amplitudes.begin(), amplitudes.end());
  dqmq::SweepDirection dir;
  if (direction == "trace_weighted") {
    dir = dqmq::SweepDirection::trace_weighted;
  } else if (direction == "top_hessian") {
    dir = dqmq::SweepDirection::top_hessian;
  } else {
    throw dqmq::ConfigError("direction must be trace_weighted or top_hessian, got '" +
                            direction + "'");
  }

  std::vector<dqmq::SweepCurve> curves;
  for (int lvl : levels) {
    const dqmq::Dataset sub = dqmq::subset_by_level(ds, lvl);
    if (sub.count() == 0) {
      throw dqmq::ConfigError("no samples at level " + std::to_string(lvl));
    }
    const std::int64_t n = std::min<std::int64_t>(batch, sub.count());
    std::vector<float> x(static_cast<std::size_t>(n * sub.image_size()));
    dqmq::Batch b;
    for (std::int64_t i = 0; i < n; ++i) {
      auto img = sub.image(i);
      std::copy(img.begin(), img.end(), x.begin() + i * sub.image_size());
      b.y.push_back(sub.labels[static_cast<std::size_t>(i)]);
    }
    b.x = dqmq::Tensor::from_data({static_cast<int>(n), sub.channels, sub.height, sub.width},
                                  std::move(x));
    const auto prof = dqmq::profile_model(m, b, probes, seed, lvl);
    std::vector<double> traces;
    for (const auto& lt : prof.layers) traces.push_back(lt.trace);
    dqmq::SweepCurve c;
    c.quality_level = lvl;
    c.points = dqmq::perturbation_sweep(m, b, traces, amplitudes, dir, seed);
    curves.push_back(std::move(c));
  }
  dqmq::emit_sweep_csv(curves, out_csv);
  for (const auto& c : curves) {
    double best_amp = 0.0, best_loss = 0.0;
    bool first = true;
    for (const auto& [amp, loss] : c.points) {
      if (first || loss < best_loss) {
        best_amp = amp;
        best_loss = loss;
        first = false;
      }
    }
    std::cout << "level " << c.quality_level << ": argmin amplitude " << best_amp
              << " (loss " << best_loss << ")\n";
  }
  std::cout << "sweep -> " << out_csv << "\n";
  return 0;
}

int cmd_deploy_sim(const std::string& model_path, const std::string& policy_path,
                   const std::string& data_dir, const std::string& mode_str,
                   const std::string& schedule_arg, std::uint64_t seed, int batches,
                   int batch_size, double tau, int window, const std::string& out_dir) {
  const auto mc = dqmq::load_checkpoint(model_path);
  const auto pc = dqmq::load_checkpoint(policy_path);
  const dqmq::SensitivityProfile profile = profile_of(pc);
  const dqmq::Dataset ds = dqmq::load_dataset(data_dir);
  const TrainMeta tm = quant_settings(pc);

  json sched_json;
  if (!schedule_arg.empty() && schedule_arg.front() == '[') {
    try {
      sched_json = json::parse(schedule_arg);
    } catch (const json::exception& e) {
      throw dqmq::ConfigError("inline schedule is not valid JSON: " + std::string(e.what()));
    }
  } else {
    sched_json = read_json_file(schedule_arg);
  }
  if (!sched_json.is_array() || sched_json.empty()) {
    throw dqmq::ConfigError("schedule must be a non-empty JSON array of quality levels");
  }
  const auto schedule = sched_json.get<std::vector<int>>();

  dqmq::Server server = dqmq::build_server(mc, pc, profile, ds, tm.mode, tm.exact);
  dqmq::DetectorConfig det;
  det.tau = tau;
  det.window = window;
  const dqmq::SessionLog log =
      dqmq::simulate_session(server, dqmq::deploy_mode_from_string(mode_str), schedule, ds,
                             seed, batches, batch_size, det);

  fs::create_directories(out_dir);
  write_text(out_dir + "/session.jsonl", log.to_jsonl());
  json segs = json::array();
  for (const auto& s : log.segments) {
    segs.push_back({{"level", s.level},
                    {"batches", s.batches},
                    {"swap_batch", s.swap_batch},
                    {"acc_before_swap", s.acc_before},
                    {"acc_after_swap", s.acc_after}});
  }
  write_text(out_dir + "/summary.json",
             json{{"mode", mode_str},
                  {"swaps", log.swaps},
                  {"triggers", log.triggers},
                  {"requests", log.requests},
                  {"segments", segs}}
                     .dump(2) +
                 "\n");
  std::cout << "session: " << log.swaps << " swaps, " << log.triggers << " triggers, "
            << log.requests << " requests -> " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-quality-aware mixed-precision quantization toolkit"};
  app.require_subcommand(1);

  std::string base = "synth", out, config, data, model_path, policy_path;
  std::string mode = "policy", direction = "top_hessian", schedule;
  std::string rho_csv, out_json;
  int per_level = 200, classes = 10, per_class = 0, size = 32;
  int probes = 4, batch = 128, bits = 8, batches = 6, batch_size = 32, window = 2;
  std::uint64_t seed = 1;
  double eps = 1e-3, tau = 0.3;
  std::vector<double> amplitudes;
  std::vector<int> levels;

  auto* prep = app.add_subcommand("prepare-data", "Build a mixed-quality dataset");
  prep->add_option("--base", base, "'synth' or a CIFAR binary file");
  prep->add_option("--per-level", per_level, "samples per quality level");
  prep->add_option("--classes", classes, "classes for the synthetic base");
  prep->add_option("--per-class", per_class, "synthetic base size per class (0 = auto)");
  prep->add_option("--size", size, "synthetic image side length");
  prep->add_option("--seed", seed, "rng seed");
  prep->add_option("--out", out, "output dataset directory")->required();

  auto* sens = app.add_subcommand("sensitivity", "Per-layer traces across quality levels");
  sens->add_option("--model", model_path, "model checkpoint")->required();
  sens->add_option("--data", data, "dataset directory")->required();
  sens->add_option("--probes", probes, "Hutchinson probes");
  sens->add_option("--batch", batch, "samples per level batch");
  sens->add_option("--seed", seed, "rng seed");
  sens->add_option("--eps", eps, "finite-difference step");
  sens->add_option("--out", out, "trace CSV path")->required();
  sens->add_option("--rho-csv", rho_csv, "rank-correlation CSV path");
  sens->add_option("--json", out_json, "full table JSON path");

  auto* train = app.add_subcommand("train", "Joint bit-width policy + QAT training");
  train->add_option("--config", config, "training config JSON")->required();
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "Accuracy per quality level");
  eval->add_option("--model", model_path, "model checkpoint")->required();
  eval->add_option("--policy", policy_path, "policy checkpoint")->required();
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--mode", mode, "policy | fixed");
  eval->add_option("--bits", bits, "bits for fixed mode");
  eval->add_option("--batch", batch, "evaluation batch size");
  eval->add_option("--out", out, "report JSON path")->required();

  auto* sweep = app.add_subcommand("perturb-sweep", "Loss vs weight-perturbation amplitude");
  sweep->add_option("--model", model_path, "model checkpoint")->required();
  sweep->add_option("--data", data, "dataset directory")->required();
  sweep->add_option("--amplitudes", amplitudes, "amplitude grid (0 injected if absent)");
  sweep->add_option("--direction", direction, "trace_weighted | top_hessian");
  sweep->add_option("--levels", levels, "quality levels (default: all present)");
  sweep->add_option("--probes", probes, "Hutchinson probes for trace weighting");
  sweep->add_option("--batch", batch, "samples per level batch");
  sweep->add_option("--seed", seed, "rng seed");
  sweep->add_option("--out", out, "sweep CSV path")->required();

  auto* dep = app.add_subcommand("deploy-sim", "Edge/server deployment session");
  dep->add_option("--model", model_path, "model checkpoint")->required();
  dep->add_option("--policy", policy_path, "policy checkpoint")->required();
  dep->add_option("--data", data, "dataset directory (calibration + stream)")->required();
  dep->add_option("--mode", mode, "full | partial | skeleton")->required();
  dep->add_option("--schedule", schedule, "JSON array of levels, inline or a file")->required();
  dep->add_option("--seed", seed, "rng seed");
  dep->add_option("--batches-per-segment", batches, "stream batches per segment");
  dep->add_option("--batch-size", batch_size, "stream batch size");
  dep->add_option("--tau", tau, "detector threshold");
  dep->add_option("--window", window, "detector window, in batches");
  dep->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  }

  try {
    if (prep->parsed()) {
      return cmd_prepare_data(base, per_level, classes, per_class, size, seed, out);
    }
    if (sens->parsed()) {
      return cmd_sensitivity(model_path, data, probes, batch, seed, eps, out, rho_csv,
                             out_json);
    }
    if (train->parsed()) return cmd_train(config, data, out);
    if (eval->parsed()) {
      return cmd_evaluate(model_path, policy_path, data, mode, bits, batch, out);
    }
    if (sweep->parsed()) {
      return cmd_perturb_sweep(model_path, data, amplitudes, direction, levels, probes,
                               batch, seed, out);
    }
    if (dep->parsed()) {
      return cmd_deploy_sim(model_path, policy_path, data, mode, schedule, seed, batches,
                            batch_size, tau, window, out);
    }
  } catch (const dqmq::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const dqmq::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
