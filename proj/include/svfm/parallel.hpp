#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace svfm {

inline unsigned default_thread_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

// Runs body(i) for i in [0, n) across up to n_threads workers. Work items
// must write only to their own slot of any shared output so results are
// deterministic regardless of scheduling. The first exception thrown by a
// work item is rethrown on the calling thread after all workers finish.
template <typename Body>
void parallel_for(std::size_t n, const Body& body, unsigned n_threads = 0) {
  if (n == 0) return;
  if (n_threads == 0) n_threads = default_thread_count();
  if (n_threads > n) n_threads = unsigned(n);

  if (n_threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (unsigned k = 0; k < n_threads; ++k) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace svfm
