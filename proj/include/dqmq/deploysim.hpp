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

#ifndef DQMQ_DEPLOYSIM_HPP
#define DQMQ_DEPLOYSIM_HPP

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dqmq/dataquality.hpp"
#include "dqmq/model.hpp"
#include "dqmq/policy.hpp"
#include "dqmq/report.hpp"
#include "dqmq/sensitivity.hpp"
#include "json.hpp"

namespace dqmq {

inline constexpr int kProtocolVersion = 1;

enum class DeployMode { full, partial, skeleton };

DeployMode deploy_mode_from_string(const std::string& s);
std::string to_string(DeployMode m);

/// Length-prefixed JSON framing: u32 little-endian byte count, then the
/// JSON document. decode advances pos past the frame.
std::vector<std::uint8_t> encode_message(const nlohmann::json& j);
nlohmann::json decode_message(std::span<const std::uint8_t> bytes, std::size_t& pos);

struct ModelRequest {
  int version = kProtocolVersion;
  std::string device_id;
  double quality_score = 0.0;
  int level_estimate = 0;

  nlohmann::json to_json() const;
  static ModelRequest from_json(const nlohmann::json& j);
};

struct ModelResponse {
  int version = kProtocolVersion;
  int served_level = 0;
  std::vector<int> actions;
  std::string provenance;
  std::vector<std::uint8_t> payload;  // checkpoint bytes, weights quantized

  nlohmann::json to_json() const;
  static ModelResponse from_json(const nlohmann::json& j);
};

/// One-directional lossless FIFO byte pipe between the two actors.
class MessageQueue {
 public:
  void push(std::vector<std::uint8_t> frame);
  std::vector<std::uint8_t> pop();
  bool empty() const { return frames_.empty(); }

 private:
  std::deque<std::vector<std::uint8_t>> frames_;
};

struct DetectorConfig {
  double tau = 0.3;  // relative deviation of variance-of-Laplacian
  int window = 2;    // batches in the rolling mean
};

struct Server {
  Model model;  // full-precision masters
  PolicyState policy;
  SensitivityProfile profile;
  Dataset calib;  // mixed-quality calibration pool
  QuantMode quant_mode = QuantMode::symmetric;
  bool exact = false;
  double temperature = 1.0;
  int batch = 64;
  int version = kProtocolVersion;

  std::map<int, double> level_score_means;  // detector landmarks per level
};

Server build_server(const CheckpointData& model_ckpt, const CheckpointData& policy_ckpt,
                    const SensitivityProfile& profile, Dataset calib,
                    QuantMode mode, bool exact = false, double temperature = 1.0);

/// Argmax decisions on a calibration batch at the requested quality, masters
/// quantized at those bits, packaged as a checkpoint payload.
ModelResponse serve_request(Server& s, const ModelRequest& req);

struct EdgeState {
  DeployMode mode = DeployMode::skeleton;
  DetectorConfig detector;
  Model model;  // masters in full/partial, served quantized weights in skeleton
  std::vector<int> actions;
  int active_level = 0;
  double calibrated_mean = 0.0;
  std::deque<double> window;

  // Carried only in full/partial deployments.
  PolicyState policy;
  SensitivityProfile profile;
  QuantMode quant_mode = QuantMode::symmetric;
  bool exact = false;
  double temperature = 1.0;

  std::map<int, double> level_score_means;

  int estimate_level(double score) const;
};

/// Rolling-mean update; returns the relative deviation when it exceeds tau.
std::optional<double> detect_shift(EdgeState& e, const Batch& batch);

struct SegmentStats {
  int level = 0;
  int batches = 0;
  int swap_batch = -1;  // batch index of the swap inside this segment, -1 none
  double acc_before = 0.0;
  double acc_after = 0.0;  // defined only when swap_batch >= 0
};

struct SessionLog {
  std::vector<nlohmann::json> events;
  std::vector<SegmentStats> segments;
  int swaps = 0;           // weight replacements (server payload or local requant)
  int triggers = 0;
  int requests = 0;        // server round-trips

  std::string to_jsonl() const;
};

/// Drives the edge through the level schedule, one segment per entry.
/// Handling of a trigger depends on the mode: full re-decides every batch
/// locally, partial requantizes locally, skeleton round-trips to the server.
SessionLog simulate_session(Server& server, DeployMode mode,
                            std::span<const int> schedule, const Dataset& stream,
                            std::uint64_t seed, int batches_per_segment = 6,
                            int batch_size = 32, DetectorConfig det = {});

}  // namespace dqmq

#endif  // DQMQ_DEPLOYSIM_HPP
