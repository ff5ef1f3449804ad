#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#if defined(__SSE2__) || defined(_M_X64)
#include <xmmintrin.h>
#define MULTIAXIAL_HAS_MXCSR 1
#endif

namespace multiaxial {

/// Floating-point control state that worker threads copy from their caller.
inline unsigned fp_mode() {
#ifdef MULTIAXIAL_HAS_MXCSR
  return _mm_getcsr();
#else
  return 0;
#endif
}

inline void set_fp_mode([[maybe_unused]] unsigned mode) {
#ifdef MULTIAXIAL_HAS_MXCSR
  _mm_setcsr(mode);
#endif
}

/// Enables flush-to-zero and denormals-are-zero for the current thread while
/// in scope. Denormal activations slow float math by an order of magnitude.
class FlushDenormals {
 public:
  FlushDenormals() : saved_(fp_mode()) {
#ifdef MULTIAXIAL_HAS_MXCSR
    set_fp_mode(saved_ | 0x8040u);
#endif
  }
  ~FlushDenormals() { set_fp_mode(saved_); }
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned saved_;
};

inline int default_threads() {
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Work items are
/// handed out dynamically; the first exception thrown is rethrown. Workers
/// run with the caller's floating-point mode.
template <class F>
void parallel_for(std::int64_t n, int threads, F&& fn) {
  threads = static_cast<int>(std::clamp<std::int64_t>(threads, 1, std::max<std::int64_t>(n, 1)));
  if (threads == 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  const unsigned mode = fp_mode();
  auto worker = [&] {
    set_fp_mode(mode);
    for (;;) {
      const auto i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next.store(n);
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace multiaxial
