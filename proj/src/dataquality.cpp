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

#include "dqmq/dataquality.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>

#include "dqmq/errors.hpp"
#include "dqmq/parallel.hpp"
#include "json.hpp"

namespace dqmq {

namespace {

std::int64_t reflect(std::int64_t i, std::int64_t n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}

/// 4-neighbor Laplacian of one channel plane, reflect edges.
void laplacian_plane(const float* src, int h, int w, float* dst) {
  for (int y = 0; y < h; ++y) {
    const float* up = src + reflect(y - 1, h) * w;
    const float* dn = src + reflect(y + 1, h) * w;
    const float* row = src + static_cast<std::int64_t>(y) * w;
    float* out = dst + static_cast<std::int64_t>(y) * w;
    for (int x = 0; x < w; ++x) {
      const float left = row[reflect(x - 1, w)];
      const float right = row[reflect(x + 1, w)];
      out[x] = up[x] + dn[x] + left + right - 4.0f * row[x];
    }
  }
}

}  // namespace

int blur_radius_for_level(int level) {
  switch (level) {
    case 3: return 1;
    case 4: return 3;
    case 5: return 5;
    default:
      throw ContractError("blur_radius_for_level: level " + std::to_string(level) +
                          " is not a blur level");
  }
}

std::span<const float> Dataset::image(std::int64_t i) const {
  return {images.data() + i * image_size(), static_cast<std::size_t>(image_size())};
}

std::span<float> Dataset::image_mut(std::int64_t i) {
  return {images.data() + i * image_size(), static_cast<std::size_t>(image_size())};
}

int Dataset::num_classes() const {
  int k = 0;
  for (int l : labels) k = std::max(k, l + 1);
  return k;
}

std::vector<float> gaussian_kernel(int radius) {
  if (radius < 1) throw ContractError("gaussian_kernel: radius must be >= 1");
  const double sigma = radius / 2.0;
  const int half = 2 * radius + 1;
  std::vector<float> k(static_cast<std::size_t>(2 * half + 1));
  double sum = 0.0;
  for (int i = -half; i <= half; ++i) {
    const double w = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + half)] = static_cast<float>(w);
    sum += w;
  }
  for (auto& v : k) v = static_cast<float>(v / sum);
  return k;
}

void gaussian_blur(std::span<float> img, int channels, int height, int width,
                   int radius) {
  const auto kernel = gaussian_kernel(radius);
  const int half = 2 * radius + 1;
  std::vector<float> tmp(static_cast<std::size_t>(height) * width);
  std::vector<float> out(tmp.size());
  for (int c = 0; c < channels; ++c) {
    float* plane = img.data() + static_cast<std::int64_t>(c) * height * width;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        double acc = 0.0;
        for (int i = -half; i <= half; ++i) {
          acc += static_cast<double>(kernel[static_cast<std::size_t>(i + half)]) *
                 plane[static_cast<std::int64_t>(y) * width + reflect(x + i, width)];
        }
        tmp[static_cast<std::size_t>(y) * width + x] = static_cast<float>(acc);
      }
    }
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        double acc = 0.0;
        for (int i = -half; i <= half; ++i) {
          acc += static_cast<double>(kernel[static_cast<std::size_t>(i + half)]) *
                 tmp[reflect(y + i, height) * width + x];
        }
        out[static_cast<std::size_t>(y) * width + x] = static_cast<float>(acc);
      }
    }
    std::copy(out.begin(), out.end(), plane);
  }
}

void sharpen(std::span<float> img, int channels, int height, int width) {
  std::vector<float> lap(static_cast<std::size_t>(height) * width);
  for (int c = 0; c < channels; ++c) {
    float* plane = img.data() + static_cast<std::int64_t>(c) * height * width;
    laplacian_plane(plane, height, width, lap.data());
    for (std::size_t i = 0; i < lap.size(); ++i) {
      plane[i] = std::clamp(plane[i] - lap[i], 0.0f, 1.0f);
    }
  }
}

double quality_score(std::span<const float> img, int channels, int height,
                     int width) {
  std::vector<float> lap(static_cast<std::size_t>(height) * width);
  double sum = 0.0, sumsq = 0.0;
  const std::int64_t total = static_cast<std::int64_t>(channels) * height * width;
  for (int c = 0; c < channels; ++c) {
    laplacian_plane(img.data() + static_cast<std::int64_t>(c) * height * width,
                    height, width, lap.data());
    for (float v : lap) {
      sum += v;
      sumsq += static_cast<double>(v) * v;
    }
  }
  const double m = sum / static_cast<double>(total);
  return std::max(0.0, sumsq / static_cast<double>(total) - m * m);
}

double mean_quality_score(const Dataset& ds, std::span<const std::int64_t> indices) {
  if (indices.empty()) throw ContractError("mean_quality_score: empty index set");
  double acc = 0.0;
  for (auto i : indices) {
    acc += quality_score(ds.image(i), ds.channels, ds.height, ds.width);
  }
  return acc / static_cast<double>(indices.size());
}

void apply_level(std::span<float> img, int channels, int height, int width,
                 int level) {
  switch (level) {
    case 1: sharpen(img, channels, height, width); return;
    case 2: return;
    case 3:
    case 4:
    case 5:
      gaussian_blur(img, channels, height, width, blur_radius_for_level(level));
      return;
    default:
      throw ContractError("apply_level: quality level " + std::to_string(level) +
                          " outside 1..5");
  }
}

Dataset load_cifar_binary(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_cifar_binary: cannot open " + path);
  f.seekg(0, std::ios::end);
  const std::int64_t size = f.tellg();
  f.seekg(0);
  constexpr std::int64_t kRecord = 3073;  // 1 label byte + 3*32*32 pixels
  if (size % kRecord != 0) {
    throw FormatError("load_cifar_binary: file length " + std::to_string(size) +
                      " is not a multiple of 3073; partial record begins at byte offset " +
                      std::to_string((size / kRecord) * kRecord));
  }
  const std::int64_t n = size / kRecord;
  std::vector<unsigned char> raw(static_cast<std::size_t>(size));
  f.read(reinterpret_cast<char*>(raw.data()), size);
  if (!f) throw IoError("load_cifar_binary: short read on " + path);

  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.images.resize(static_cast<std::size_t>(n) * 3072);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const unsigned char* rec = raw.data() + i * kRecord;
    ds.labels[static_cast<std::size_t>(i)] = rec[0];
    float* dst = ds.images.data() + i * 3072;
    for (int j = 0; j < 3072; ++j) {
      dst[j] = static_cast<float>(rec[1 + j]) / 255.0f;
    }
  }
  return ds;
}

Dataset synth_dataset(int classes, int per_class, std::uint64_t seed, int size) {
  if (classes < 2 || per_class < 1 || size < 8) {
    throw ContractError("synth_dataset: need classes >= 2, per_class >= 1, size >= 8");
  }
  Dataset ds;
  ds.channels = 3;
  ds.height = size;
  ds.width = size;
  const std::int64_t n = static_cast<std::int64_t>(classes) * per_class;
  ds.images.resize(static_cast<std::size_t>(n) * ds.image_size());
  ds.labels.resize(static_cast<std::size_t>(n));
  Rng rng(seed);
  std::int64_t idx = 0;
  for (int rep = 0; rep < per_class; ++rep) {
    for (int c = 0; c < classes; ++c, ++idx) {
      ds.labels[static_cast<std::size_t>(idx)] = c;
      const double freq = 2.0 + 0.8 * c;
      const double theta = std::numbers::pi * c / classes;
      const double phase = rng.uniform(-0.6, 0.6);
      const double cs = std::cos(theta), sn = std::sin(theta);
      float* img = ds.images.data() + idx * ds.image_size();
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double u = (x * cs + y * sn) / size;
          const double base =
              0.5 + 0.4 * std::sin(2.0 * std::numbers::pi * freq * u + phase);
          for (int ch = 0; ch < 3; ++ch) {
            const double v = base + rng.normal(0.0, 0.08);
            img[(static_cast<std::int64_t>(ch) * size + y) * size + x] =
                static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
    }
  }
  return ds;
}

Dataset build_mixed(const Dataset& base, int per_level, std::uint64_t seed) {
  const int k = base.num_classes();
  if (k < 1) throw ConfigError("build_mixed: base dataset has no labels");
  if (per_level % k != 0) {
    throw ConfigError("build_mixed: per-level count " + std::to_string(per_level) +
                      " is not divisible by " + std::to_string(k) + " classes");
  }
  const int per_class_level = per_level / k;
  std::map<int, std::vector<std::int64_t>> pools;
  for (std::int64_t i = 0; i < base.count(); ++i) {
    pools[base.labels[static_cast<std::size_t>(i)]].push_back(i);
  }
  Rng rng(seed);
  for (auto& [cls, pool] : pools) {
    const std::int64_t need = static_cast<std::int64_t>(per_class_level) * kQualityLevels;
    if (static_cast<std::int64_t>(pool.size()) < need) {
      throw ConfigError("build_mixed: class " + std::to_string(cls) + " has " +
                        std::to_string(pool.size()) + " samples, need " +
                        std::to_string(need));
    }
    rng.shuffle(pool);
  }

  struct Pick { std::int64_t src; int level; };
  std::vector<Pick> picks;
  picks.reserve(static_cast<std::size_t>(per_level) * kQualityLevels);
  std::map<int, std::size_t> cursor;
  for (int level = 1; level <= kQualityLevels; ++level) {
    for (auto& [cls, pool] : pools) {
      for (int j = 0; j < per_class_level; ++j) {
        picks.push_back({pool[cursor[cls]++], level});
      }
    }
  }
  rng.shuffle(picks);

  Dataset out;
  out.channels = base.channels;
  out.height = base.height;
  out.width = base.width;
  out.images.resize(picks.size() * static_cast<std::size_t>(base.image_size()));
  out.labels.resize(picks.size());
  out.levels.resize(picks.size());
  parallel_for(static_cast<std::int64_t>(picks.size()), [&](std::int64_t i) {
    const auto& p = picks[static_cast<std::size_t>(i)];
    auto src = base.image(p.src);
    auto dst = out.image_mut(i);
    std::copy(src.begin(), src.end(), dst.begin());
    apply_level(dst, out.channels, out.height, out.width, p.level);
    out.labels[static_cast<std::size_t>(i)] = base.labels[static_cast<std::size_t>(p.src)];
    out.levels[static_cast<std::size_t>(i)] = p.level;
  });
  return out;
}

Dataset subset_by_level(const Dataset& ds, int level) {
  if (ds.levels.empty()) throw ContractError("subset_by_level: dataset is untagged");
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  for (std::int64_t i = 0; i < ds.count(); ++i) {
    if (ds.levels[static_cast<std::size_t>(i)] != level) continue;
    auto img = ds.image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    out.levels.push_back(level);
  }
  return out;
}

std::pair<Dataset, Dataset> split_mixed(const Dataset& ds, int train_per_level) {
  if (ds.levels.empty()) throw ContractError("split_mixed: dataset is untagged");
  Dataset train, test;
  for (Dataset* d : {&train, &test}) {
    d->channels = ds.channels;
    d->height = ds.height;
    d->width = ds.width;
  }
  std::map<int, int> seen;
  for (std::int64_t i = 0; i < ds.count(); ++i) {
    const int level = ds.levels[static_cast<std::size_t>(i)];
    Dataset& dst = (seen[level]++ < train_per_level) ? train : test;
    auto img = ds.image(i);
    dst.images.insert(dst.images.end(), img.begin(), img.end());
    dst.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    dst.levels.push_back(level);
  }
  return {std::move(train), std::move(test)};
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("save_dataset: cannot create " + dir + ": " + ec.message());

  nlohmann::json manifest;
  manifest["channels"] = ds.channels;
  manifest["height"] = ds.height;
  manifest["width"] = ds.width;
  manifest["count"] = ds.count();
  auto entries = nlohmann::json::array();
  for (std::int64_t i = 0; i < ds.count(); ++i) {
    entries.push_back({{"index", i},
                       {"label", ds.labels[static_cast<std::size_t>(i)]},
                       {"level", ds.levels.empty() ? 0 : ds.levels[static_cast<std::size_t>(i)]}});
  }
  manifest["entries"] = std::move(entries);

  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!mf) throw IoError("save_dataset: cannot write manifest in " + dir);
  mf << manifest.dump(2) << "\n";

  std::ofstream bf(fs::path(dir) / "images.bin", std::ios::binary);
  if (!bf) throw IoError("save_dataset: cannot write images.bin in " + dir);
  bf.write(reinterpret_cast<const char*>(ds.images.data()),
           static_cast<std::streamsize>(ds.images.size() * sizeof(float)));
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IoError("load_dataset: cannot open manifest.json in " + dir);
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_dataset: bad manifest.json: " + std::string(e.what()));
  }

  Dataset ds;
  ds.channels = manifest.at("channels").get<int>();
  ds.height = manifest.at("height").get<int>();
  ds.width = manifest.at("width").get<int>();
  const auto count = manifest.at("count").get<std::int64_t>();
  for (const auto& e : manifest.at("entries")) {
    ds.labels.push_back(e.at("label").get<int>());
    ds.levels.push_back(e.at("level").get<int>());
  }
  if (static_cast<std::int64_t>(ds.labels.size()) != count) {
    throw FormatError("load_dataset: manifest count disagrees with entry list");
  }
  if (std::all_of(ds.levels.begin(), ds.levels.end(), [](int l) { return l == 0; })) {
    ds.levels.clear();
  }

  std::ifstream bf(fs::path(dir) / "images.bin", std::ios::binary);
  if (!bf) throw IoError("load_dataset: cannot open images.bin in " + dir);
  bf.seekg(0, std::ios::end);
  const std::int64_t bytes = bf.tellg();
  bf.seekg(0);
  const std::int64_t expect = count * ds.image_size() * static_cast<std::int64_t>(sizeof(float));
  if (bytes != expect) {
    throw FormatError("load_dataset: images.bin is " + std::to_string(bytes) +
                      " bytes, manifest implies " + std::to_string(expect));
  }
  ds.images.resize(static_cast<std::size_t>(count * ds.image_size()));
  bf.read(reinterpret_cast<char*>(ds.images.data()), bytes);
  if (!bf) throw IoError("load_dataset: short read on images.bin");
  return ds;
}

}  // namespace dqmq
