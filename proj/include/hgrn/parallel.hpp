// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>

namespace hgrn {

/// Worker cap: HGRN2_THREADS if set and positive, else 1.
int worker_count();

/// Runs body(begin, end) over a static partition of [0, n). Each index is
/// handled by exactly one worker, so results do not depend on the worker
/// count as long as body writes disjoint outputs per index.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body,
                  std::int64_t min_per_worker = 1);

}  // namespace hgrn
