#pragma once

#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <thread>
#include <vector>

namespace fv2ic {

// Worker cap: FV2IC_THREADS if set, else hardware concurrency.
inline int worker_budget() {
  if (const char* env = std::getenv("FV2IC_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc ? static_cast<int>(hc) : 1;
}

// Runs fn(i) for i in [0,n). Results must be written into pre-sized slots by
// the callers themselves, which keeps output independent of scheduling.
// Exceptions are rethrown (first one wins) after all workers join.
inline void parallel_for(int n, const std::function<void(int)>& fn, int max_workers = 0) {
  if (max_workers <= 0) max_workers = worker_budget();
  const int workers = std::min(max_workers, n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace fv2ic
