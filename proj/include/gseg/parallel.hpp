#pragma once

#include <cstddef>
#include <thread>
#include <vector>

namespace gseg {

/// Global worker count for batch-parallel kernels. Results are bit-identical
/// for every thread count: workers own disjoint output slices and shared
/// accumulations are reduced in a fixed order.
inline int& num_threads() {
  static int n = 1;
  return n;
}

inline void set_num_threads(int n) { num_threads() = n < 1 ? 1 : n; }

/// Runs fn(i) for i in [0, n), splitting the range into contiguous chunks.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  int workers = num_threads();
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::vector<std::thread> pool;
  pool.reserve(k - 1);
  std::size_t chunk = (n + k - 1) / k;
  auto run = [&fn, n, chunk](std::size_t w) {
    std::size_t lo = w * chunk;
    std::size_t hi = std::min(n, lo + chunk);
    for (std::size_t i = lo; i < hi; ++i) fn(i);
  };
  for (std::size_t w = 1; w < k; ++w) pool.emplace_back(run, w);
  run(0);
  for (auto& t : pool) t.join();
}

}  // namespace gseg
