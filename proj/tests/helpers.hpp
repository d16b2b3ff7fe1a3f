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

#ifndef DQMQ_TESTS_HELPERS_HPP
#define DQMQ_TESTS_HELPERS_HPP

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dqmq/tensor.hpp"

namespace dqmq::testing {

/// Rebuilds the loss from the current leaf values. Called many times by the
/// finite-difference checker, so it must not hold stale tensors.
using LossFn = std::function<Tensor()>;

struct GradCheckResult {
  double max_rel = 0.0;
  std::int64_t worst_index = -1;
  double ad = 0.0;
  double fd = 0.0;
};

/// Central-difference check of d(loss)/d(leaf) against reverse mode.
/// Perturbs every coordinate of `leaf`; loss is re-recorded per evaluation.
inline GradCheckResult grad_check(const LossFn& make_loss, Tensor& leaf,
                                  double h = 5e-3, double abs_floor = 5e-5) {
  leaf.zero_grad();
  Tensor loss = make_loss();
  backward(loss);
  std::vector<double> ad(leaf.grad().begin(), leaf.grad().end());
  leaf.zero_grad();

  GradCheckResult res;
  auto vals = leaf.mutable_data();
  for (std::int64_t i = 0; i < leaf.size(); ++i) {
    const float orig = vals[static_cast<std::size_t>(i)];
    const double step = h * (1.0 + std::abs(static_cast<double>(orig)));
    vals[static_cast<std::size_t>(i)] = static_cast<float>(orig + step);
    const double fp = make_loss().item();
    vals[static_cast<std::size_t>(i)] = static_cast<float>(orig - step);
    const double fm = make_loss().item();
    vals[static_cast<std::size_t>(i)] = orig;
    const double fd = (fp - fm) / (2.0 * step);
    const double denom =
        std::max({std::abs(ad[static_cast<std::size_t>(i)]), std::abs(fd), abs_floor});
    const double rel = std::abs(ad[static_cast<std::size_t>(i)] - fd) / denom;
    if (rel > res.max_rel) {
      res.max_rel = rel;
      res.worst_index = i;
      res.ad = ad[static_cast<std::size_t>(i)];
      res.fd = fd;
    }
  }
  return res;
}

/// Unique scratch directory under the system temp root, removed on scope exit.
class TmpDir {
 public:
  explicit TmpDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("dqmq_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TmpDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TmpDir(const TmpDir&) = delete;
  TmpDir& operator=(const TmpDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::vector<float> random_values(std::size_t n, std::uint32_t seed,
                                        float lo = -2.0f, float hi = 2.0f) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

inline std::vector<std::uint8_t> slurp_bytes(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) return {};
  std::fseek(f, 0, SEEK_END);
  const long n = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n));
  if (n > 0 && std::fread(out.data(), 1, out.size(), f) != out.size()) out.clear();
  std::fclose(f);
  return out;
}

inline std::string slurp_text(const std::string& path) {
  const auto b = slurp_bytes(path);
  return {b.begin(), b.end()};
}

}  // namespace dqmq::testing

#endif  // DQMQ_TESTS_HELPERS_HPP
