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

#include "dqmq/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dqmq/errors.hpp"
#include "dqmq/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace dqmq {

std::int64_t LayerSpec::param_count() const {
  if (kind == LayerKind::conv) {
    return static_cast<std::int64_t>(out_ch) * in_ch * kernel * kernel;
  }
  return static_cast<std::int64_t>(in_features) * out_features;
}

Shape LayerSpec::weight_shape() const {
  if (kind == LayerKind::conv) return {out_ch, in_ch, kernel, kernel};
  return {in_features, out_features};
}

int LayerSpec::bias_size() const {
  return kind == LayerKind::conv ? out_ch : out_features;
}

int Model::num_quantizable() const {
  int n = 0;
  for (const auto& l : layers) n += l.quantizable ? 1 : 0;
  return n;
}

std::vector<std::int64_t> Model::quantizable_param_counts() const {
  std::vector<std::int64_t> out;
  for (const auto& l : layers) {
    if (l.quantizable) out.push_back(l.param_count());
  }
  return out;
}

std::int64_t Model::weight_param_total() const {
  std::int64_t n = 0;
  for (const auto& l : layers) n += l.param_count();
  return n;
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back(&weights[i]);
    out.push_back(&biases[i]);
  }
  return out;
}

Model build_backbone(const TopologyConfig& cfg) {
  if (cfg.name != "tiny8") {
    throw ConfigError("build_backbone: unknown topology '" + cfg.name + "'");
  }
  if (cfg.width < 1 || cfg.classes < 2) {
    throw ConfigError("build_backbone: width must be >= 1 and classes >= 2");
  }
  const int w = cfg.width;
  Model m;
  m.config = cfg;

  auto conv = [](std::string name, int in, int out, int stride, bool skip) {
    LayerSpec s;
    s.name = std::move(name);
    s.kind = LayerKind::conv;
    s.in_ch = in;
    s.out_ch = out;
    s.kernel = 3;
    s.stride = stride;
    s.pad = 1;
    s.skip_add = skip;
    return s;
  };
  m.layers.push_back(conv("conv1", cfg.input_channels, w, 1, false));
  m.layers.push_back(conv("conv2", w, w, 1, true));
  m.layers.push_back(conv("conv3", w, 2 * w, 2, false));
  m.layers.push_back(conv("conv4", 2 * w, 2 * w, 1, true));
  m.layers.push_back(conv("conv5", 2 * w, 4 * w, 2, false));
  m.layers.push_back(conv("conv6", 4 * w, 4 * w, 1, true));
  m.layers.push_back(conv("conv7", 4 * w, 8 * w, 2, false));
  m.layers.push_back(conv("conv8", 8 * w, 8 * w, 1, true));
  LayerSpec fc;
  fc.name = "fc";
  fc.kind = LayerKind::fc;
  fc.in_features = 8 * w;
  fc.out_features = cfg.classes;
  m.layers.push_back(fc);

  Rng rng(cfg.seed);
  for (const auto& spec : m.layers) {
    const std::int64_t fan_in = spec.kind == LayerKind::conv
                                    ? static_cast<std::int64_t>(spec.in_ch) * spec.kernel * spec.kernel
                                    : spec.in_features;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    m.weights.push_back(uniform_tensor(spec.weight_shape(), rng, -bound, bound, true));
    m.biases.push_back(Tensor::zeros({spec.bias_size()}, true));
  }
  return m;
}

Tensor forward_with_hook(const Model& m, const Tensor& x, const QuantHook& hook) {
  Tensor h = x;
  for (int i = 0; i < m.num_layers(); ++i) {
    const auto& spec = m.layers[static_cast<std::size_t>(i)];
    if (spec.kind == LayerKind::conv) {
      auto [wq, xq] = hook(i, m.weights[static_cast<std::size_t>(i)], h);
      Tensor y = conv2d(xq, wq, spec.stride, spec.pad);
      y = bias_add_nchw(y, m.biases[static_cast<std::size_t>(i)]);
      if (spec.skip_add) y = add(y, h);  // skip sees full-precision activations
      h = relu(y);
    } else {
      if (h.ndim() == 4) h = global_avg_pool(h);
      auto [wq, xq] = hook(i, m.weights[static_cast<std::size_t>(i)], h);
      Tensor y = matmul(xq, wq);
      h = bias_add_cols(y, m.biases[static_cast<std::size_t>(i)]);
    }
  }
  return h;
}

Tensor forward_plain(const Model& m, const Tensor& x) {
  return forward_with_hook(
      m, x, [](int, const Tensor& w, const Tensor& in) { return std::make_pair(w, in); });
}

Tensor forward_quantized(const Model& m, const Tensor& x,
                         std::span<const int> actions, QuantMode mode, bool exact) {
  if (static_cast<int>(actions.size()) != m.num_quantizable()) {
    throw ContractError("forward_quantized: " + std::to_string(actions.size()) +
                        " actions for " + std::to_string(m.num_quantizable()) +
                        " quantizable layers");
  }
  for (int a : actions) {
    if (a < 0 || a > 32) {
      throw ContractError("forward_quantized: action " + std::to_string(a) +
                          " outside [0,32]");
    }
  }
  // Map layer index -> action slot.
  std::vector<int> slot(static_cast<std::size_t>(m.num_layers()), -1);
  int q = 0;
  for (int i = 0; i < m.num_layers(); ++i) {
    if (m.layers[static_cast<std::size_t>(i)].quantizable) slot[static_cast<std::size_t>(i)] = q++;
  }
  return forward_with_hook(m, x, [&](int idx, const Tensor& w, const Tensor& in) {
    const int s = slot[static_cast<std::size_t>(idx)];
    if (s < 0) return std::make_pair(w, in);
    const int bits = actions[static_cast<std::size_t>(s)];
    return std::make_pair(fake_quant_bits(w, bits, mode, exact),
                          fake_quant_bits(in, bits, mode, exact));
  });
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'D', 'Q', 'M', 'Q', 'C', 'K', 'P', 'T'};
constexpr std::uint16_t kVersion = 1;

}  // namespace

const NamedTensor* CheckpointData::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> checkpoint_to_bytes(const CheckpointData& c) {
  nlohmann::json manifest;
  manifest["meta"] = c.meta;
  auto list = nlohmann::json::array();
  for (const auto& t : c.tensors) {
    list.push_back({{"name", t.name}, {"shape", t.shape}, {"count", t.data.size()}});
    if (numel(t.shape) != static_cast<std::int64_t>(t.data.size())) {
      throw ContractError("checkpoint: tensor '" + t.name + "' shape/data mismatch");
    }
  }
  manifest["tensors"] = std::move(list);
  const std::string mbytes = manifest.dump();
  if (mbytes.size() > 0xFFFFFFFFull) throw ContractError("checkpoint: manifest too large");

  std::vector<std::uint8_t> out;
  auto put = [&out](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  };
  put(kMagic, sizeof(kMagic));
  const std::uint16_t ver = c.version;
  put(&ver, sizeof(ver));
  const std::uint32_t mlen = static_cast<std::uint32_t>(mbytes.size());
  put(&mlen, sizeof(mlen));
  put(mbytes.data(), mbytes.size());
  for (const auto& t : c.tensors) {
    put(t.data.data(), t.data.size() * sizeof(float));
  }
  return out;
}

CheckpointData checkpoint_from_bytes(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (pos + n > bytes.size()) {
      throw FormatError(std::string("checkpoint: truncated ") + what);
    }
  };
  need(sizeof(kMagic), "header");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  pos += sizeof(kMagic);
  std::uint16_t ver = 0;
  need(sizeof(ver), "header");
  std::memcpy(&ver, bytes.data() + pos, sizeof(ver));
  pos += sizeof(ver);
  if (ver != kVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(ver));
  }
  std::uint32_t mlen = 0;
  need(sizeof(mlen), "header");
  std::memcpy(&mlen, bytes.data() + pos, sizeof(mlen));
  pos += sizeof(mlen);
  need(mlen, "manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + mlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: manifest is not valid JSON: " + std::string(e.what()));
  }
  pos += mlen;

  CheckpointData c;
  c.version = ver;
  c.meta = manifest.value("meta", nlohmann::json::object());

  const std::int64_t avail = static_cast<std::int64_t>(bytes.size() - pos);
  std::int64_t off = 0;
  for (const auto& e : manifest.at("tensors")) {
    NamedTensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<Shape>();
    const auto count = e.at("count").get<std::int64_t>();
    if (numel(t.shape) != count) {
      throw FormatError("checkpoint: tensor '" + t.name + "' count disagrees with shape");
    }
    const std::int64_t nb = count * static_cast<std::int64_t>(sizeof(float));
    if (off + nb > avail) {
      throw FormatError("checkpoint: payload length mismatch: tensor '" + t.name +
                        "' needs " + std::to_string(nb) + " bytes at offset " +
                        std::to_string(off) + " but only " + std::to_string(avail - off) +
                        " remain");
    }
    t.data.resize(static_cast<std::size_t>(count));
    std::memcpy(t.data.data(), bytes.data() + pos + off, static_cast<std::size_t>(nb));
    off += nb;
    c.tensors.push_back(std::move(t));
  }
  if (off != avail) {
    throw FormatError("checkpoint: " + std::to_string(avail - off) +
                      " trailing payload bytes");
  }
  return c;
}

void save_checkpoint(const CheckpointData& c, const std::string& path) {
  const auto bytes = checkpoint_to_bytes(c);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_checkpoint: cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("save_checkpoint: write failed on " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

CheckpointData checkpoint_from_model(const Model& m) {
  CheckpointData c;
  c.meta["topology"] = {{"name", m.config.name},
                        {"width", m.config.width},
                        {"classes", m.config.classes},
                        {"input_channels", m.config.input_channels},
                        {"seed", m.config.seed}};
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto wdata = m.weights[i].data();
    auto bdata = m.biases[i].data();
    c.tensors.push_back({"w:" + m.layers[i].name, m.weights[i].shape(),
                         std::vector<float>(wdata.begin(), wdata.end())});
    c.tensors.push_back({"b:" + m.layers[i].name, m.biases[i].shape(),
                         std::vector<float>(bdata.begin(), bdata.end())});
  }
  return c;
}

Model model_from_checkpoint(const CheckpointData& c) {
  if (!c.meta.contains("topology")) {
    throw FormatError("model_from_checkpoint: meta lacks a topology record");
  }
  const auto& t = c.meta["topology"];
  TopologyConfig cfg;
  cfg.name = t.at("name").get<std::string>();
  cfg.width = t.at("width").get<int>();
  cfg.classes = t.at("classes").get<int>();
  cfg.input_channels = t.at("input_channels").get<int>();
  cfg.seed = t.at("seed").get<std::uint64_t>();
  Model m = build_backbone(cfg);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    for (const char* prefix : {"w:", "b:"}) {
      const std::string name = prefix + m.layers[i].name;
      const NamedTensor* nt = c.find(name);
      if (!nt) throw FormatError("model_from_checkpoint: missing tensor '" + name + "'");
      Tensor& dst = prefix[0] == 'w' ? m.weights[i] : m.biases[i];
      if (nt->shape != dst.shape()) {
        throw FormatError("model_from_checkpoint: tensor '" + name + "' has shape " +
                          shape_str(nt->shape) + ", model expects " + shape_str(dst.shape()));
      }
      auto span = dst.mutable_data();
      std::copy(nt->data.begin(), nt->data.end(), span.begin());
    }
  }
  return m;
}

}  // namespace dqmq
