#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace ridgelab {

/// Worker cap from LAB_WORKERS (default 1). Recorded in run metadata; results
/// are bit-identical for any value because work is split into fixed-size
/// blocks and combined in block order.
inline int lab_workers() {
  const char* env = std::getenv("LAB_WORKERS");
  if (!env) return 1;
  const int v = std::atoi(env);
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  return std::clamp(v, 1, std::max(1, hw));
}

/// Runs fn(begin, end) over [0, n) split into fixed blocks. The block
/// decomposition never depends on the worker count.
template <typename Fn>
void parallel_blocks(long n, long block, Fn&& fn, int workers = lab_workers()) {
  if (n <= 0) return;
  const long n_blocks = (n + block - 1) / block;
  if (workers <= 1 || n_blocks <= 1) {
    for (long b = 0; b < n_blocks; ++b) fn(b * block, std::min(n, (b + 1) * block));
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      for (long b = w; b < n_blocks; b += workers) fn(b * block, std::min(n, (b + 1) * block));
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace ridgelab
