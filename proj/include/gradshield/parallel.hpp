#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace gradshield {

// Worker count from an explicit request, else GRADSHIELD_THREADS, else the
// hardware concurrency. Always at least 1.
std::size_t resolve_threads(std::size_t requested = 0);

// Calls f(i) for i in [0, n) on up to `threads` workers. Work items must
// write only to their own slot, which keeps results independent of the
// schedule. The first exception is rethrown after all workers stop.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  threads = std::min(std::max<std::size_t>(threads, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace gradshield
