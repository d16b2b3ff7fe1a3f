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

#include "dqmq/deploysim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include "dqmq/errors.hpp"
#include "dqmq/quant.hpp"
#include "dqmq/rng.hpp"

namespace dqmq {

DeployMode deploy_mode_from_string(const std::string& s) {
  if (s == "full") return DeployMode::full;
  if (s == "partial") return DeployMode::partial;
  if (s == "skeleton") return DeployMode::skeleton;
  throw ConfigError("deploy mode must be full, partial or skeleton, got '" + s + "'");
}

std::string to_string(DeployMode m) {
  switch (m) {
    case DeployMode::full: return "full";
    case DeployMode::partial: return "partial";
    case DeployMode::skeleton: return "skeleton";
  }
  throw ContractError("unreachable deploy mode");
}

std::vector<std::uint8_t> encode_message(const nlohmann::json& j) {
  const std::string body = j.dump();
  if (body.size() > 0xFFFFFFFFull) throw ProtocolError("message too large to frame");
  std::vector<std::uint8_t> out(4 + body.size());
  const std::uint32_t len = static_cast<std::uint32_t>(body.size());
  std::memcpy(out.data(), &len, 4);
  std::memcpy(out.data() + 4, body.data(), body.size());
  return out;
}

nlohmann::json decode_message(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + 4 > bytes.size()) throw ProtocolError("truncated frame header");
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + pos, 4);
  if (pos + 4 + len > bytes.size()) {
    throw ProtocolError("frame announces " + std::to_string(len) + " bytes, " +
                        std::to_string(bytes.size() - pos - 4) + " available");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos + 4),
                              bytes.begin() + static_cast<std::ptrdiff_t>(pos + 4 + len));
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError("frame body is not valid JSON: " + std::string(e.what()));
  }
  pos += 4 + len;
  return j;
}

namespace {

std::string to_hex(std::span<const std::uint8_t> b) {
  static const char* digits = "0123456789abcdef";
  std::string s(b.size() * 2, '0');
  for (std::size_t i = 0; i < b.size(); ++i) {
    s[2 * i] = digits[b[i] >> 4];
    s[2 * i + 1] = digits[b[i] & 0xF];
  }
  return s;
}

std::vector<std::uint8_t> from_hex(const std::string& s) {
  if (s.size() % 2 != 0) throw ProtocolError("hex payload has odd length");
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw ProtocolError(std::string("bad hex digit '") + c + "'");
  };
  std::vector<std::uint8_t> out(s.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>((nib(s[2 * i]) << 4) | nib(s[2 * i + 1]));
  }
  return out;
}

Batch batch_from_indices(const Dataset& ds, std::span<const std::int64_t> idx) {
  const std::int64_t isz = ds.image_size();
  std::vector<float> x(idx.size() * static_cast<std::size_t>(isz));
  Batch b;
  b.y.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto img = ds.image(idx[i]);
    std::copy(img.begin(), img.end(), x.begin() + static_cast<std::int64_t>(i) * isz);
    b.y.push_back(ds.labels[static_cast<std::size_t>(idx[i])]);
  }
  b.x = Tensor::from_data({static_cast<int>(idx.size()), ds.channels, ds.height, ds.width},
                          std::move(x));
  return b;
}

std::map<int, double> score_landmarks(const Dataset& ds) {
  std::map<int, std::pair<double, std::int64_t>> acc;
  for (std::int64_t i = 0; i < ds.count(); ++i) {
    acc[ds.levels[static_cast<std::size_t>(i)]].first +=
        quality_score(ds.image(i), ds.channels, ds.height, ds.width);
    acc[ds.levels[static_cast<std::size_t>(i)]].second += 1;
  }
  std::map<int, double> out;
  for (const auto& [lvl, p] : acc) out[lvl] = p.first / static_cast<double>(p.second);
  return out;
}

Model deep_copy(const Model& m) { return model_from_checkpoint(checkpoint_from_model(m)); }

double batch_mean_score(const Batch& b) {
  const auto sh = b.x.shape();
  const std::int64_t n = sh[0];
  const std::int64_t isz = sh[1] * sh[2] * sh[3];
  auto v = b.x.data();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    s += quality_score(v.subspan(static_cast<std::size_t>(i * isz),
                                 static_cast<std::size_t>(isz)),
                       static_cast<int>(sh[1]), static_cast<int>(sh[2]),
                       static_cast<int>(sh[3]));
  }
  return s / static_cast<double>(n);
}

/// Checkpoint of m with each quantizable weight tensor replaced by its
/// fake-quantized values at the layer's action.
std::vector<std::uint8_t> quantized_payload(const Model& m, std::span<const int> actions,
                                            QuantMode mode, bool exact) {
  GradOff off;
  Model copy = deep_copy(m);
  std::size_t slot = 0;
  for (std::size_t l = 0; l < copy.layers.size(); ++l) {
    if (!copy.layers[l].quantizable) continue;
    const int bits = actions[slot++];
    if (bits == 32) continue;
    Tensor q = fake_quant_bits(copy.weights[l], bits, mode, exact);
    auto src = q.data();
    auto dst = copy.weights[l].mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  CheckpointData c = checkpoint_from_model(copy);
  c.meta["quantized_actions"] = std::vector<int>(actions.begin(), actions.end());
  return checkpoint_to_bytes(c);
}

}  // namespace

nlohmann::json ModelRequest::to_json() const {
  return {{"type", "model_request"},
          {"version", version},
          {"device", device_id},
          {"quality_score", quality_score},
          {"level_estimate", level_estimate}};
}

ModelRequest ModelRequest::from_json(const nlohmann::json& j) {
  try {
    if (j.at("type").get<std::string>() != "model_request") {
      throw ProtocolError("expected a model_request message");
    }
    ModelRequest r;
    r.version = j.at("version").get<int>();
    r.device_id = j.at("device").get<std::string>();
    r.quality_score = j.at("quality_score").get<double>();
    r.level_estimate = j.at("level_estimate").get<int>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError("malformed model_request: " + std::string(e.what()));
  }
}

nlohmann::json ModelResponse::to_json() const {
  return {{"type", "model_response"},
          {"version", version},
          {"served_level", served_level},
          {"actions", actions},
          {"provenance", provenance},
          {"payload_hex", to_hex(payload)}};
}

ModelResponse ModelResponse::from_json(const nlohmann::json& j) {
  try {
    if (j.at("type").get<std::string>() != "model_response") {
      throw ProtocolError("expected a model_response message");
    }
    ModelResponse r;
    r.version = j.at("version").get<int>();
    r.served_level = j.at("served_level").get<int>();
    r.actions = j.at("actions").get<std::vector<int>>();
    r.provenance = j.at("provenance").get<std::string>();
    r.payload = from_hex(j.at("payload_hex").get<std::string>());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError("malformed model_response: " + std::string(e.what()));
  }
}

void MessageQueue::push(std::vector<std::uint8_t> frame) {
  frames_.push_back(std::move(frame));
}

std::vector<std::uint8_t> MessageQueue::pop() {
  if (frames_.empty()) throw ProtocolError("pop on empty message queue");
  auto f = std::move(frames_.front());
  frames_.pop_front();
  return f;
}

Server build_server(const CheckpointData& model_ckpt, const CheckpointData& policy_ckpt,
                    const SensitivityProfile& profile, Dataset calib,
                    QuantMode mode, bool exact, double temperature) {
  Server s;
  s.model = model_from_checkpoint(model_ckpt);
  s.policy = policy_from_checkpoint(policy_ckpt, s.model);
  s.profile = profile;
  s.calib = std::move(calib);
  s.quant_mode = mode;
  s.exact = exact;
  s.temperature = temperature;
  if (s.calib.count() == 0) throw ContractError("build_server: empty calibration set");
  s.level_score_means = score_landmarks(s.calib);
  return s;
}

ModelResponse serve_request(Server& s, const ModelRequest& req) {
  if (req.version != s.version) {
    throw ProtocolError("request speaks protocol version " + std::to_string(req.version) +
                        ", server speaks " + std::to_string(s.version));
  }
  std::set<int> have;
  for (int lvl : s.calib.levels) have.insert(lvl);
  int serve_level = req.level_estimate;
  std::string warning;
  if (!have.count(serve_level)) {
    int best = *have.begin();
    for (int lvl : have) {
      if (std::abs(lvl - req.level_estimate) < std::abs(best - req.level_estimate)) {
        best = lvl;
      }
    }
    warning = "; warning: unknown level " + std::to_string(req.level_estimate) +
              ", fell back to nearest level " + std::to_string(best);
    serve_level = best;
  }

  const Dataset sub = subset_by_level(s.calib, serve_level);
  const std::int64_t n = std::min<std::int64_t>(s.batch, sub.count());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  const Batch b = batch_from_indices(sub, idx);

  GradOff off;
  ModelResponse resp;
  resp.version = s.version;
  resp.served_level = serve_level;
  resp.actions = policy_actions_argmax(s.model, s.policy, s.profile, b.x, s.temperature,
                                       s.quant_mode, s.exact);
  resp.provenance = "argmax decisions on calibration level " + std::to_string(serve_level) +
                    ", batch " + std::to_string(n) + warning;
  resp.payload = quantized_payload(s.model, resp.actions, s.quant_mode, s.exact);
  return resp;
}

int EdgeState::estimate_level(double score) const {
  if (level_score_means.empty()) throw ContractError("edge has no score landmarks");
  int best = level_score_means.begin()->first;
  double gap = std::abs(score - level_score_means.begin()->second);
  for (const auto& [lvl, mean] : level_score_means) {
    const double g = std::abs(score - mean);
    if (g < gap) {
      gap = g;
      best = lvl;
    }
  }
  return best;
}

std::optional<double> detect_shift(EdgeState& e, const Batch& batch) {
  if (e.detector.window < 1) throw ContractError("detector window must be >= 1");
  if (!(e.calibrated_mean > 0.0)) {
    throw ContractError("detector is uncalibrated: calibrated mean must be positive");
  }
  e.window.push_back(batch_mean_score(batch));
  while (static_cast<int>(e.window.size()) > e.detector.window) e.window.pop_front();
  double m = 0.0;
  for (double v : e.window) m += v;
  m /= static_cast<double>(e.window.size());
  const double dev = std::abs(m - e.calibrated_mean) / e.calibrated_mean;
  if (dev > e.detector.tau) return dev;
  return std::nullopt;
}

std::string SessionLog::to_jsonl() const {
  std::string out;
  for (const auto& e : events) {
    out += e.dump();
    out += '\n';
  }
  return out;
}

SessionLog simulate_session(Server& server, DeployMode mode,
                            std::span<const int> schedule, const Dataset& stream,
                            std::uint64_t seed, int batches_per_segment,
                            int batch_size, DetectorConfig det) {
  if (schedule.empty()) throw ContractError("simulate_session: empty schedule");
  if (batches_per_segment < 1 || batch_size < 1) {
    throw ContractError("simulate_session: need at least one batch of one sample");
  }

  SessionLog log;
  Rng rng(seed ^ 0x53A1C45D96E2F0B1ull);
  MessageQueue to_server, to_edge;

  EdgeState edge;
  edge.mode = mode;
  edge.detector = det;
  edge.level_score_means = server.level_score_means;
  edge.quant_mode = server.quant_mode;
  edge.exact = server.exact;
  edge.temperature = server.temperature;
  edge.active_level = schedule[0];
  const auto lm = edge.level_score_means.find(schedule[0]);
  if (lm == edge.level_score_means.end()) {
    throw ContractError("simulate_session: schedule level " + std::to_string(schedule[0]) +
                        " absent from calibration data");
  }
  edge.calibrated_mean = lm->second;

  // Initial deployment: one provisioning round-trip, not counted as a swap.
  {
    ModelRequest req;
    req.device_id = "edge-0";
    req.version = server.version;
    req.quality_score = edge.calibrated_mean;
    req.level_estimate = schedule[0];
    const ModelResponse resp = serve_request(server, req);
    edge.actions = resp.actions;
    if (mode == DeployMode::skeleton) {
      edge.model = model_from_checkpoint(checkpoint_from_bytes(resp.payload));
    } else {
      edge.model = deep_copy(server.model);
      CheckpointData pc;
      append_policy_tensors(server.policy, pc);
      edge.policy = policy_from_checkpoint(pc, edge.model);
      edge.profile = server.profile;
    }
    log.events.push_back({{"type", "deploy"},
                          {"mode", to_string(mode)},
                          {"level", schedule[0]},
                          {"actions", edge.actions}});
  }

  GradOff off;
  for (std::size_t seg = 0; seg < schedule.size(); ++seg) {
    const int level = schedule[seg];
    const Dataset sub = subset_by_level(stream, level);
    if (sub.count() == 0) {
      throw ContractError("simulate_session: stream has no samples at level " +
                          std::to_string(level));
    }
    SegmentStats stats;
    stats.level = level;
    stats.batches = batches_per_segment;
    log.events.push_back({{"type", "segment_start"},
                          {"segment", seg},
                          {"level", level}});
    double acc_before = 0.0, acc_after = 0.0;
    int n_before = 0, n_after = 0;

    for (int bi = 0; bi < batches_per_segment; ++bi) {
      std::vector<std::int64_t> idx(static_cast<std::size_t>(batch_size));
      for (auto& i : idx) {
        i = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(sub.count())));
      }
      const Batch b = batch_from_indices(sub, idx);

      if (mode == DeployMode::full) {
        // Full deployment re-decides on every batch; no detector involved.
        auto acts = policy_actions_argmax(edge.model, edge.policy, edge.profile, b.x,
                                          edge.temperature, edge.quant_mode, edge.exact);
        if (acts != edge.actions) {
          edge.actions = std::move(acts);
          log.events.push_back({{"type", "decide"},
                                {"segment", seg},
                                {"batch", bi},
                                {"actions", edge.actions}});
        }
      }

      const Tensor logits =
          mode == DeployMode::skeleton
              ? forward_plain(edge.model, b.x)
              : forward_quantized(edge.model, b.x, edge.actions, edge.quant_mode, edge.exact);
      const double acc = accuracy_from_logits(logits, b.y);
      if (stats.swap_batch < 0) {
        acc_before += acc;
        ++n_before;
      } else {
        acc_after += acc;
        ++n_after;
      }
      log.events.push_back({{"type", "batch"},
                            {"segment", seg},
                            {"batch", bi},
                            {"accuracy", acc}});

      if (mode == DeployMode::full) continue;
      const auto dev = detect_shift(edge, b);
      if (!dev) continue;
      ++log.triggers;
      log.events.push_back({{"type", "trigger"},
                            {"segment", seg},
                            {"batch", bi},
                            {"deviation", *dev}});

      // The rolling mean is smoothed across the shift; the freshest batch
      // score is the best evidence of the new quality level.
      const double latest = edge.window.back();

      if (mode == DeployMode::partial) {
        // Local policy and quantizer, masters on hand: no round-trip.
        edge.actions = policy_actions_argmax(edge.model, edge.policy, edge.profile, b.x,
                                             edge.temperature, edge.quant_mode, edge.exact);
        edge.active_level = edge.estimate_level(latest);
        log.events.push_back({{"type", "swap"},
                              {"transport", "local"},
                              {"segment", seg},
                              {"batch", bi},
                              {"actions", edge.actions}});
      } else {
        ModelRequest req;
        req.version = server.version;
        req.device_id = "edge-0";
        req.quality_score = latest;
        req.level_estimate = edge.estimate_level(latest);
        to_server.push(encode_message(req.to_json()));
        {
          const auto frame = to_server.pop();
          std::size_t pos = 0;
          const ModelRequest parsed = ModelRequest::from_json(decode_message(frame, pos));
          const ModelResponse resp = serve_request(server, parsed);
          to_edge.push(encode_message(resp.to_json()));
        }
        const auto frame = to_edge.pop();
        std::size_t pos = 0;
        const ModelResponse resp = ModelResponse::from_json(decode_message(frame, pos));
        ++log.requests;
        log.events.push_back({{"type", "request"},
                              {"segment", seg},
                              {"batch", bi},
                              {"level_estimate", req.level_estimate},
                              {"served_level", resp.served_level}});
        edge.model = model_from_checkpoint(checkpoint_from_bytes(resp.payload));
        edge.actions = resp.actions;
        edge.active_level = resp.served_level;
        log.events.push_back({{"type", "swap"},
                              {"transport", "server"},
                              {"segment", seg},
                              {"batch", bi},
                              {"actions", edge.actions}});
      }
      ++log.swaps;
      if (stats.swap_batch < 0) stats.swap_batch = bi;
      const auto newlm = edge.level_score_means.find(edge.active_level);
      edge.calibrated_mean = newlm != edge.level_score_means.end() ? newlm->second : latest;
      edge.window.clear();
      log.events.push_back({{"type", "recalibrate"},
                            {"segment", seg},
                            {"level", edge.active_level},
                            {"mean", edge.calibrated_mean}});
    }

    stats.acc_before = n_before > 0 ? acc_before / n_before : 0.0;
    stats.acc_after = n_after > 0 ? acc_after / n_after : 0.0;
    log.events.push_back({{"type", "segment_end"},
                          {"segment", seg},
                          {"level", level},
                          {"acc_before_swap", stats.acc_before},
                          {"acc_after_swap", stats.acc_after},
                          {"swap_batch", stats.swap_batch}});
    log.segments.push_back(stats);
  }
  return log;
}

}  // namespace dqmq
