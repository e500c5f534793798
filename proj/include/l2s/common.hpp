// SPDX-License-Identifier: Apache-2.0
#ifndef L2S_COMMON_HPP
#define L2S_COMMON_HPP

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace l2s {

// Additive magnitude marking a forbidden attention position. Applied as a
// large *negative* bias so the softmax weight underflows to exactly zero.
inline constexpr double kNegLarge = 1e9;

// ---------------------------------------------------------------------------
// Errors. Three categories map onto CLI exit codes: usage (2), validation (3),
// numeric (4).
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : Error { using Error::Error; };
struct ValidationError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };

// numerics
struct ShapeMismatch : ValidationError { using ValidationError::ValidationError; };
struct AllMaskedRow : NumericError { using NumericError::NumericError; };
struct NoTape : ValidationError { using ValidationError::ValidationError; };
struct MissingGrad : ValidationError { using ValidationError::ValidationError; };
struct NonDeterministicFunction : ValidationError { using ValidationError::ValidationError; };

// layout
struct InvalidBox : ValidationError { using ValidationError::ValidationError; };
struct EmptyMask : ValidationError { using ValidationError::ValidationError; };
struct CaptionTooLong : ValidationError { using ValidationError::ValidationError; };

// model
struct EmptyCaption : ValidationError { using ValidationError::ValidationError; };
struct BadRefFrame : ValidationError { using ValidationError::ValidationError; };

// diffusion
struct BadRange : ValidationError { using ValidationError::ValidationError; };
struct BadTimestep : ValidationError { using ValidationError::ValidationError; };
struct BadSpec : ValidationError { using ValidationError::ValidationError; };
struct MissingStage1Checkpoint : ValidationError { using ValidationError::ValidationError; };
struct NonFiniteLoss : NumericError { using NumericError::NumericError; };

// pipeline
struct MissingScore : ValidationError { using ValidationError::ValidationError; };
struct NoSubject : ValidationError { using ValidationError::ValidationError; };
struct TooFewPoints : ValidationError { using ValidationError::ValidationError; };
struct MissingMetadata : ValidationError { using ValidationError::ValidationError; };
struct SplitLeak : ValidationError { using ValidationError::ValidationError; };

// eval
struct DegenerateInput : ValidationError { using ValidationError::ValidationError; };
struct NotSquare : ValidationError { using ValidationError::ValidationError; };
struct TooFewFrames : ValidationError { using ValidationError::ValidationError; };

// io
struct IoError : ValidationError { using ValidationError::ValidationError; };

// ---------------------------------------------------------------------------
// Hashing (stable across platforms; used for RNG stream labels, token ids and
// file checksums).
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

// splitmix64 finalizer
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// ---------------------------------------------------------------------------
// Worker pool. Work is split into per-thread row ranges; every row is computed
// by the same code regardless of which thread runs it, so results are bitwise
// identical to the single-threaded reference path. L2S_THREADS caps the worker
// count (default 1 = reference mode).
// ---------------------------------------------------------------------------

class WorkerPool {
 public:
  static WorkerPool& instance() {
    static WorkerPool pool;
    return pool;
  }

  static int env_threads() {
    if (const char* v = std::getenv("L2S_THREADS")) {
      int n = std::atoi(v);
      if (n >= 1) return n;
    }
    return 1;
  }

  int threads() const { return n_threads_; }

  void set_threads(int n) {
    std::lock_guard<std::mutex> lk(api_mutex_);
    n = std::max(1, n);
    if (n == n_threads_) return;
    shutdown();
    n_threads_ = n;
    spawn();
  }

  // Runs fn(begin, end) over a partition of [0, n) across all threads.
  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    std::lock_guard<std::mutex> lk(api_mutex_);
    int t = static_cast<int>(std::min<int64_t>(n_threads_, n));
    if (t <= 1) {
      fn(0, n);
      return;
    }
    job_fn_ = &fn;
    job_n_ = n;
    job_parts_ = t;
    pending_.store(t - 1, std::memory_order_release);
    {
      std::lock_guard<std::mutex> g(mutex_);
      ++generation_;
    }
    cv_.notify_all();
    run_part(0);  // caller takes the first chunk
    while (pending_.load(std::memory_order_acquire) != 0) std::this_thread::yield();
    job_fn_ = nullptr;
  }

  ~WorkerPool() { shutdown(); }

 private:
  WorkerPool() : n_threads_(env_threads()) { spawn(); }

  void spawn() {
    stop_ = false;
    for (int i = 1; i < n_threads_; ++i) {
      workers_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  void shutdown() {
    {
      std::lock_guard<std::mutex> g(mutex_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void worker_loop(int index) {
    uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_.wait(lk, [&] { return generation_ != seen; });
        seen = generation_;
        if (stop_) return;
      }
      if (index < job_parts_) {
        run_part(index);
        pending_.fetch_sub(1, std::memory_order_release);
      }
    }
  }

  void run_part(int part) {
    int64_t chunk = (job_n_ + job_parts_ - 1) / job_parts_;
    int64_t b = part * chunk;
    int64_t e = std::min<int64_t>(job_n_, b + chunk);
    if (b < e) (*job_fn_)(b, e);
  }

  int n_threads_ = 1;
  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::mutex api_mutex_;
  std::condition_variable cv_;
  uint64_t generation_ = 0;
  bool stop_ = false;
  const std::function<void(int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0;
  int job_parts_ = 1;
  std::atomic<int> pending_{0};
};

inline void parallel_rows(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  WorkerPool::instance().run(n, fn);
}

}  // namespace l2s

#endif  // L2S_COMMON_HPP
