#pragma once

#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mgplvm {

inline int default_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : int(n);
}

// Static striped parallel loop: task i runs on worker i % n_threads.
// The assignment depends only on n_threads, so per-worker accumulators
// reduced in worker order give bit-identical results for a fixed worker
// count, regardless of scheduling.
inline void parallel_for_striped(int n_tasks, int n_threads,
                                 const std::function<void(int task, int worker)>& fn) {
  if (n_threads <= 1 || n_tasks <= 1) {
    for (int i = 0; i < n_tasks; ++i) fn(i, 0);
    return;
  }
  int workers = std::min(n_threads, n_tasks);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (int i = w; i < n_tasks; i += workers) fn(i, w);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace mgplvm
