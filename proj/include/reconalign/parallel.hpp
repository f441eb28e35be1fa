#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace reconalign {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items are
/// distributed by index, so writes into pre-sized result slots keep outputs
/// independent of scheduling. The first exception thrown by any item is
/// rethrown on the calling thread.
inline void parallel_for(size_t n, int threads,
                         const std::function<void(size_t)>& fn) {
  if (n == 0) return;
  const size_t workers =
      std::min<size_t>(n, threads < 1 ? 1 : static_cast<size_t>(threads));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }

  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace reconalign
