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

#ifndef DQMQ_DATAQUALITY_HPP
#define DQMQ_DATAQUALITY_HPP

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dqmq/rng.hpp"

namespace dqmq {

/// Quality levels: 1 = sharpened, 2 = raw, 3/4/5 = Gaussian blur radius 1/3/5.
inline constexpr int kQualityLevels = 5;

int blur_radius_for_level(int level);  // 3->1, 4->3, 5->5

/// Images are N x C x H x W, row-major, values in [0,1].
struct Dataset {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> images;
  std::vector<int> labels;
  std::vector<int> levels;  // empty until build_mixed tags samples

  std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t image_size() const {
    return static_cast<std::int64_t>(channels) * height * width;
  }
  std::span<const float> image(std::int64_t i) const;
  std::span<float> image_mut(std::int64_t i);
  int num_classes() const;
};

/// Separable Gaussian, sigma = radius/2, kernel half-width 2*radius+1,
/// reflect padding, weights normalized to sum 1.
std::vector<float> gaussian_kernel(int radius);
void gaussian_blur(std::span<float> img, int channels, int height, int width,
                   int radius);

/// out = clamp(img - laplacian(img), 0, 1); 4-neighbor stencil, reflect edges.
void sharpen(std::span<float> img, int channels, int height, int width);

/// Variance of the Laplacian response pooled over all channels.
double quality_score(std::span<const float> img, int channels, int height,
                     int width);
double mean_quality_score(const Dataset& ds, std::span<const std::int64_t> indices);

/// Applies the transform a quality level denotes (level 2 is a no-op).
void apply_level(std::span<float> img, int channels, int height, int width,
                 int level);

/// CIFAR-10 binary records: 1 label byte + 3072 pixel bytes.
Dataset load_cifar_binary(const std::string& path);

/// Class-conditional oriented gratings, one frequency/orientation per class.
Dataset synth_dataset(int classes, int per_class, std::uint64_t seed,
                      int size = 32);

/// Draws per_level label-balanced disjoint samples per quality level,
/// applies the level transform, tags, and shuffles deterministically.
Dataset build_mixed(const Dataset& base, int per_level, std::uint64_t seed);

/// Filters a tagged dataset down to one quality level.
Dataset subset_by_level(const Dataset& ds, int level);

/// Splits a tagged dataset into (train, test): the first train_per_level
/// occurrences of each level go to train, the rest to test. Order preserved.
std::pair<Dataset, Dataset> split_mixed(const Dataset& ds, int train_per_level);

/// Directory format: manifest.json + images.bin (raw little-endian f32).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace dqmq

#endif  // DQMQ_DATAQUALITY_HPP
