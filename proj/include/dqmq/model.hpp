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

#ifndef DQMQ_MODEL_HPP
#define DQMQ_MODEL_HPP

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dqmq/quant.hpp"
#include "dqmq/tensor.hpp"
#include "json.hpp"

namespace dqmq {

enum class LayerKind { conv, fc };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  // conv fields
  int in_ch = 0, out_ch = 0, kernel = 0, stride = 1, pad = 0;
  // fc fields
  int in_features = 0, out_features = 0;
  bool quantizable = true;
  bool skip_add = false;  // adds the layer's own input after the conv

  std::int64_t param_count() const;
  Shape weight_shape() const;
  int bias_size() const;
};

struct TopologyConfig {
  std::string name = "tiny8";
  int width = 8;
  int classes = 10;
  int input_channels = 3;
  std::uint64_t seed = 7;
};

/// Backbone with full-precision master weights. Quantization never writes
/// to the store; forward passes read masters and work on tape copies.
struct Model {
  TopologyConfig config;
  std::vector<LayerSpec> layers;
  std::vector<Tensor> weights;  // parallel to layers
  std::vector<Tensor> biases;

  int num_layers() const { return static_cast<int>(layers.size()); }
  int num_quantizable() const;
  std::vector<std::int64_t> quantizable_param_counts() const;
  std::int64_t weight_param_total() const;
  /// Trainable tensors in fixed order: w0, b0, w1, b1, ...
  std::vector<Tensor*> parameters();
};

/// Kaiming-uniform fan-in init (biases zero), deterministic under cfg.seed.
Model build_backbone(const TopologyConfig& cfg);

/// Per-layer transform applied to (master weight, layer input) before the
/// layer computes; returns the tensors actually convolved. The identity
/// hook reproduces the plain forward.
using QuantHook =
    std::function<std::pair<Tensor, Tensor>(int layer_idx, const Tensor& w, const Tensor& x)>;

Tensor forward_with_hook(const Model& m, const Tensor& x, const QuantHook& hook);
Tensor forward_plain(const Model& m, const Tensor& x);

/// Fake-quantizes weights and activations at actions[l] bits per quantizable
/// layer. bits 0 prunes the layer's weights; bits 32 is near-identity.
Tensor forward_quantized(const Model& m, const Tensor& x,
                         std::span<const int> actions,
                         QuantMode mode = QuantMode::symmetric,
                         bool exact = false);

// ---------------------------------------------------------------------------
// Checkpoints.
// Layout: bytes 0-7 magic "DQMQCKPT"; u16 version; u32 manifest length;
// UTF-8 JSON manifest; raw little-endian f32 payload in manifest order.

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct CheckpointData {
  std::uint16_t version = 1;
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> checkpoint_to_bytes(const CheckpointData& c);
CheckpointData checkpoint_from_bytes(std::span<const std::uint8_t> bytes);

void save_checkpoint(const CheckpointData& c, const std::string& path);
CheckpointData load_checkpoint(const std::string& path);

/// Backbone tensors are named "w:<layer>" and "b:<layer>"; meta gains a
/// "topology" object sufficient to rebuild the model.
CheckpointData checkpoint_from_model(const Model& m);
Model model_from_checkpoint(const CheckpointData& c);

}  // namespace dqmq

#endif  // DQMQ_MODEL_HPP
