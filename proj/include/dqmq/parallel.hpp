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

#ifndef DQMQ_PARALLEL_HPP
#define DQMQ_PARALLEL_HPP

#include <cstdint>
#include <functional>

namespace dqmq {

/// Worker cap: min(hardware threads, DQMQ_THREADS if set). Always >= 1.
int worker_count();

/// Runs fn(i) for i in [0, n) across worker_count() threads in contiguous
/// chunks. fn must be safe on disjoint indices. Falls back to the calling
/// thread when only one worker is available.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace dqmq

#endif  // DQMQ_PARALLEL_HPP
