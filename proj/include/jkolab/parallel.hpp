#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace jkolab {

/// Worker count for data-parallel loops. JKO_THREADS caps it; 0 or unset
/// means one worker per hardware thread.
inline unsigned thread_budget() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("JKO_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<unsigned>(std::min<long>(v, 256));
  }
  return hw;
}

/// Runs body(i) for i in [0, n). Each index is written by exactly one worker
/// and chunks are static, so results do not depend on the thread count.
template <class Body>
void parallel_for(std::size_t n, Body&& body, std::size_t min_chunk = 64) {
  unsigned workers = thread_budget();
  if (workers <= 1 || n < 2 * min_chunk) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n / min_chunk));
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  std::size_t chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
        for (std::size_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace jkolab
