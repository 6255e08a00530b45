#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace sdfatlas {

inline int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

// Splits [0, count) into one contiguous chunk per worker and runs
// fn(worker, begin, end). The partition depends only on (count, workers), so
// per-worker accumulation merged in worker order is reproducible for a fixed
// worker count. The first exception thrown by any worker is rethrown after
// all workers have joined.
inline void parallel_chunks(std::size_t count, int workers,
                            const std::function<void(int, std::size_t, std::size_t)>& fn) {
  if (workers <= 0) workers = hardware_threads();
  workers = static_cast<int>(std::min<std::size_t>(workers, std::max<std::size_t>(count, 1)));
  if (workers <= 1) {
    fn(0, 0, count);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t base = count / workers;
  const std::size_t rem = count % workers;
  std::size_t begin = 0;
  for (int w = 0; w < workers; ++w) {
    std::size_t len = base + (static_cast<std::size_t>(w) < rem ? 1 : 0);
    std::size_t end = begin + len;
    pool.emplace_back([&fn, &errors, w, begin, end] {
      try {
        fn(w, begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
    begin = end;
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace sdfatlas
