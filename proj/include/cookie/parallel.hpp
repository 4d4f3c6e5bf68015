#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "cookie/error.hpp"

namespace cookie {

/// Worker count from COOKIE_KIT_THREADS (default 1), capped at the hardware
/// concurrency.
inline std::size_t thread_limit() {
  const char* env = std::getenv("COOKIE_KIT_THREADS");
  std::size_t n = 1;
  if (env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError(std::string("COOKIE_KIT_THREADS must be a positive integer, got '") + env + "'");
    n = static_cast<std::size_t>(v);
  }
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  return std::min(n, hw);
}

/// Runs fn(i) for i in [0, n) on up to thread_limit() threads. Each index is
/// handled by exactly one thread; the first exception is rethrown.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = std::min(thread_limit(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!err) err = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace cookie
