#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace m4r {

// Splits [0, n) into contiguous ranges and runs fn(begin, end) on worker
// threads. Each index is processed by exactly one worker, so callers that
// write disjoint outputs get results independent of the thread count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t min_per_worker = 64) {
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers =
      std::min(hw, std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_per_worker)));
  if (workers <= 1) {
    if (n) fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t step = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * step;
    const std::size_t e = std::min(n, b + step);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(n, step));
  for (auto& t : pool) t.join();
}

}  // namespace m4r
