// SPDX-License-Identifier: Apache-2.0

#include "hgrn/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace hgrn {

int worker_count() {
  static const int cached = [] {
    const char* env = std::getenv("HGRN2_THREADS");
    if (env == nullptr) return 1;
    try {
      const int n = std::stoi(env);
      return n > 0 ? n : 1;
    } catch (...) {
      return 1;
    }
  }();
  return cached;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body,
                  std::int64_t min_per_worker) {
  if (n <= 0) return;
  const std::int64_t workers =
      std::min<std::int64_t>(worker_count(), std::max<std::int64_t>(1, n / std::max<std::int64_t>(1, min_per_worker)));
  if (workers <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(workers - 1));
  const std::int64_t step = (n + workers - 1) / workers;
  for (std::int64_t w = 1; w < workers; ++w) {
    const std::int64_t begin = w * step;
    const std::int64_t end = std::min(n, begin + step);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(0, std::min(n, step));
}

}  // namespace hgrn
