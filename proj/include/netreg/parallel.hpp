#ifndef NETREG_PARALLEL_HPP
#define NETREG_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace netreg {

/// Environment variable that overrides the worker count.
inline constexpr const char* kThreadsEnv = "NETREG_THREADS";

/// Worker count: `requested` if positive, else NETREG_THREADS, else the hardware count.
inline unsigned thread_count(unsigned requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv(kThreadsEnv)) {
    char* end = nullptr;
    const long value = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && value > 0) return static_cast<unsigned>(value);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/*
 * Runs fn(i) for i in [0, count) on up to `threads` workers.  Results must be
 * written to per-index slots, so output does not depend on scheduling.  The
 * first exception thrown is rethrown after all workers finish.
 */
template <class Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), count));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < workers; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace netreg

#endif  // NETREG_PARALLEL_HPP
