#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace clsreg {

// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each.
// Chunk boundaries depend only on n and the thread count, so any
// per-chunk accumulation a caller does is reproducible for a fixed
// thread count. threads <= 1 runs inline.
inline void parallel_for(std::size_t n, int threads,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t maxt = threads <= 1 ? 1 : static_cast<std::size_t>(threads);
  const std::size_t nthreads = std::min(maxt, n);
  if (nthreads == 1) {
    fn(0, n);
    return;
  }
  const std::size_t chunk = (n + nthreads - 1) / nthreads;
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (std::size_t t = 0; t < nthreads; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace clsreg
