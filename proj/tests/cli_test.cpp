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

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <string>

#include "doctest.h"
#include "dqmq/dataquality.hpp"
#include "helpers.hpp"
#include "json.hpp"

using nlohmann::json;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr, interleaved
};

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const std::string log =
      (std::filesystem::temp_directory_path() /
       ("dqmq-cli-log-" + std::to_string(getpid()) + "-" + std::to_string(counter++)))
          .string();
  const std::string cmd = std::string(DQMQ_CLI_PATH) + " " + args + " > " + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = dqmq::testing::slurp_text(log);
  std::filesystem::remove(log);
  return r;
}

/// Shared artifacts: one prepared dataset and one tiny training run.
struct CliFixture {
  dqmq::testing::TmpDir tmp{"cli"};
  std::string data_dir;
  std::string run_dir;
  std::string config_path;

  CliFixture() {
    data_dir = (tmp.path() / "data").string();
    run_dir = (tmp.path() / "run").string();
    config_path = (tmp.path() / "train.json").string();

    RunResult prep = run_cli("prepare-data --base synth --classes 4 --per-class 44 "
                             "--per-level 32 --size 8 --seed 3 --out " + data_dir);
    REQUIRE(prep.exit_code == 0);

    json cfg = {{"epochs", 2},
                {"batch_size", 16},
                {"lr_start", 0.01},
                {"lr_end", 0.001},
                {"alpha", 0.5},
                {"stage_split", 0.5},
                {"seed", 3},
                {"trace_probes", 1},
                {"trace_batch", 16},
                {"trace_refresh_every", 0},
                {"eval_samples", 32},
                {"topology", {{"width", 2}, {"seed", 5}}}};
    std::ofstream f(config_path);
    f << cfg.dump(2);
    f.close();

    RunResult train = run_cli("train --config " + config_path + " --data " + data_dir +
                              " --out " + run_dir);
    REQUIRE_MESSAGE(train.exit_code == 0, train.output);
  }
};

const CliFixture& fix() {
  static CliFixture f;
  return f;
}

}  // namespace

TEST_CASE("help exits zero") {
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("train --help").exit_code == 0);
}

TEST_CASE("missing subcommand or bad flag exits two") {
  CHECK(run_cli("").exit_code == 2);
  CHECK(run_cli("prepare-data --no-such-flag 1 --out /tmp/x").exit_code == 2);
}

TEST_CASE("prepare-data writes a balanced loadable dataset") {
  const auto& f = fix();
  const dqmq::Dataset ds = dqmq::load_dataset(f.data_dir);
  CHECK(ds.count() == 160);
  for (int lvl = 1; lvl <= 5; ++lvl) {
    CHECK(dqmq::subset_by_level(ds, lvl).count() == 32);
  }
  CHECK(ds.num_classes() == 4);
}

TEST_CASE("prepare-data is seed-deterministic") {
  const auto& f = fix();
  const std::string again = (f.tmp.path() / "data2").string();
  RunResult r = run_cli("prepare-data --base synth --classes 4 --per-class 44 "
                        "--per-level 32 --size 8 --seed 3 --out " + again);
  REQUIRE(r.exit_code == 0);
  CHECK(dqmq::testing::slurp_bytes(f.data_dir + "/images.bin") ==
        dqmq::testing::slurp_bytes(again + "/images.bin"));
  CHECK(dqmq::testing::slurp_bytes(f.data_dir + "/manifest.json") ==
        dqmq::testing::slurp_bytes(again + "/manifest.json"));
}

TEST_CASE("prepare-data over capacity names the class and exits two") {
  const auto& f = fix();
  RunResult r = run_cli("prepare-data --base synth --classes 4 --per-class 10 "
                        "--per-level 400 --size 8 --seed 3 --out " +
                        (f.tmp.path() / "data3").string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("class") != std::string::npos);
}

TEST_CASE("train emits history and checkpoints") {
  const auto& f = fix();
  const json hist = json::parse(std::ifstream(f.run_dir + "/history.json"));
  REQUIRE(hist.at("epochs").size() == 2);
  CHECK(hist.at("epochs")[0].at("stage") == "soft");
  CHECK(hist.at("epochs")[1].at("stage") == "hard");
  CHECK(hist.at("config").at("seed").get<int>() == 3);
  CHECK(std::filesystem::exists(f.run_dir + "/model.ckpt"));
  CHECK(std::filesystem::exists(f.run_dir + "/policy.ckpt"));
}

TEST_CASE("train rerun with the same seed is byte-identical") {
  const auto& f = fix();
  const std::string again = (f.tmp.path() / "run2").string();
  RunResult r = run_cli("train --config " + f.config_path + " --data " + f.data_dir +
                        " --out " + again);
  REQUIRE(r.exit_code == 0);
  CHECK(dqmq::testing::slurp_bytes(f.run_dir + "/model.ckpt") ==
        dqmq::testing::slurp_bytes(again + "/model.ckpt"));
  CHECK(dqmq::testing::slurp_bytes(f.run_dir + "/policy.ckpt") ==
        dqmq::testing::slurp_bytes(again + "/policy.ckpt"));
  CHECK(dqmq::testing::slurp_bytes(f.run_dir + "/history.json") ==
        dqmq::testing::slurp_bytes(again + "/history.json"));
}

TEST_CASE("train rejects unknown config keys by name") {
  const auto& f = fix();
  json cfg = json::parse(std::ifstream(f.config_path));
  cfg["learninng_rate"] = 0.5;
  const std::string bad = (f.tmp.path() / "bad.json").string();
  std::ofstream(bad) << cfg.dump();
  RunResult r = run_cli("train --config " + bad + " --data " + f.data_dir + " --out " +
                        (f.tmp.path() / "runx").string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("learninng_rate") != std::string::npos);
}

TEST_CASE("train with a missing data directory exits two") {
  const auto& f = fix();
  RunResult r = run_cli("train --config " + f.config_path + " --data " +
                        (f.tmp.path() / "nowhere").string() + " --out " +
                        (f.tmp.path() / "runy").string());
  CHECK(r.exit_code == 2);
}

TEST_CASE("divergent training exits three and leaves an abort checkpoint") {
  const auto& f = fix();
  json cfg = json::parse(std::ifstream(f.config_path));
  cfg["lr_start"] = 8000.0;
  cfg["lr_end"] = 7999.0;
  cfg["grad_clip"] = 0.0;
  cfg["epochs"] = 3;
  const std::string hot = (f.tmp.path() / "hot.json").string();
  std::ofstream(hot) << cfg.dump();
  const std::string out = (f.tmp.path() / "runhot").string();
  RunResult r = run_cli("train --config " + hot + " --data " + f.data_dir + " --out " + out);
  CHECK(r.exit_code == 3);
  CHECK(std::filesystem::exists(out + "/abort.ckpt"));
}

TEST_CASE("evaluate writes a report with sane fields") {
  const auto& f = fix();
  const std::string out = (f.tmp.path() / "eval.json").string();
  RunResult r = run_cli("evaluate --model " + f.run_dir + "/model.ckpt --policy " +
                        f.run_dir + "/policy.ckpt --data " + f.data_dir +
                        " --batch 32 --out " + out);
  REQUIRE_MESSAGE(r.exit_code == 0, r.output);
  const json rep = json::parse(std::ifstream(out));
  const double acc = rep.at("overall_accuracy").get<double>();
  CHECK(acc >= 0.0);
  CHECK(acc <= 100.0);
  CHECK(rep.at("compression").get<double>() > 0.0);
  CHECK(rep.at("levels").size() == 5);
  CHECK(rep.at("modal_actions").size() == 9);

  RunResult rf = run_cli("evaluate --model " + f.run_dir + "/model.ckpt --policy " +
                         f.run_dir + "/policy.ckpt --data " + f.data_dir +
                         " --mode fixed --bits 4 --batch 32 --out " + out);
  CHECK(rf.exit_code == 0);
  CHECK(json::parse(std::ifstream(out)).at("compression").get<double>() ==
        doctest::Approx(8.0));
}

TEST_CASE("sensitivity emits layer-by-level rows") {
  const auto& f = fix();
  const std::string out = (f.tmp.path() / "sens.csv").string();
  RunResult r = run_cli("sensitivity --model " + f.run_dir + "/model.ckpt --data " +
                        f.data_dir + " --probes 1 --batch 16 --out " + out);
  REQUIRE_MESSAGE(r.exit_code == 0, r.output);
  const std::string csv = dqmq::testing::slurp_text(out);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 9 * 5);
  CHECK(r.output.find("rho(level 2, level 5)") != std::string::npos);
}

TEST_CASE("perturb-sweep injects the zero amplitude") {
  const auto& f = fix();
  const std::string out = (f.tmp.path() / "sweep.csv").string();
  RunResult r = run_cli("perturb-sweep --model " + f.run_dir + "/model.ckpt --data " +
                        f.data_dir + " --amplitudes 0.01 0.02 --levels 2 --probes 1 "
                        "--batch 16 --out " + out);
  REQUIRE_MESSAGE(r.exit_code == 0, r.output);
  const std::string csv = dqmq::testing::slurp_text(out);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3);
  CHECK(csv.find("2,0,") != std::string::npos);
}

TEST_CASE("deploy-sim on a constant schedule logs zero swaps") {
  const auto& f = fix();
  const std::string out = (f.tmp.path() / "deploy").string();
  RunResult r = run_cli("deploy-sim --model " + f.run_dir + "/model.ckpt --policy " +
                        f.run_dir + "/policy.ckpt --data " + f.data_dir +
                        " --mode skeleton --schedule [2,2] --batches-per-segment 3 "
                        "--batch-size 16 --seed 9 --out " + out);
  REQUIRE_MESSAGE(r.exit_code == 0, r.output);
  const json summary = json::parse(std::ifstream(out + "/summary.json"));
  CHECK(summary.at("swaps").get<int>() == 0);
  CHECK(summary.at("segments").size() == 2);
  CHECK(std::filesystem::exists(out + "/session.jsonl"));

  RunResult bad = run_cli("deploy-sim --model " + f.run_dir + "/model.ckpt --policy " +
                          f.run_dir + "/policy.ckpt --data " + f.data_dir +
                          " --mode cloud --schedule [2] --out " + out);
  CHECK(bad.exit_code == 2);
}
