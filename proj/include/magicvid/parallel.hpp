#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace magicvid {

// Persistent worker pool. parallel_for splits [0, n) into one contiguous
// chunk per thread; chunks write disjoint output ranges, so results are
// bitwise identical to a serial run regardless of thread count.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  void resize(int n) {
    if (n < 1) n = 1;
    std::lock_guard<std::mutex> outer(api_mutex_);
    stop_workers();
    want_threads_ = n;
    start_workers();
  }

  int size() {
    std::lock_guard<std::mutex> outer(api_mutex_);
    return want_threads_;
  }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    std::lock_guard<std::mutex> outer(api_mutex_);
    int nt = want_threads_;
    if (n <= 0) return;
    if (nt <= 1 || n < 2) {
      body(0, n);
      return;
    }
    int chunks = static_cast<int>(std::min<int64_t>(nt, n));
    int64_t per = (n + chunks - 1) / chunks;
    {
      std::unique_lock<std::mutex> lk(mutex_);
      job_ = &body;
      job_n_ = n;
      job_per_ = per;
      job_chunks_ = chunks;
      next_chunk_ = 1;  // chunk 0 runs on this thread
      pending_ = chunks - 1;
      ++generation_;
    }
    cv_.notify_all();
    body(0, std::min<int64_t>(per, n));
    std::unique_lock<std::mutex> lk(mutex_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() { stop_workers(); }

 private:
  ThreadPool() : want_threads_(1) {}

  void start_workers() {
    stopping_ = false;
    for (int i = 1; i < want_threads_; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lk(mutex_);
      stopping_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
    workers_.clear();
  }

  void worker_loop() {
    uint64_t seen = 0;
    while (true) {
      const std::function<void(int64_t, int64_t)>* job = nullptr;
      int64_t n = 0, per = 0;
      int chunks = 0;
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_.wait(lk, [&] { return stopping_ || generation_ != seen; });
        seen = generation_;
        if (stopping_) return;
        job = job_;
        n = job_n_;
        per = job_per_;
        chunks = job_chunks_;
      }
      if (!job) continue;
      while (true) {
        int chunk;
        {
          std::lock_guard<std::mutex> lk(mutex_);
          // a new job may have been published; never claim across generations
          if (generation_ != seen || next_chunk_ >= chunks) break;
          chunk = next_chunk_++;
        }
        int64_t begin = static_cast<int64_t>(chunk) * per;
        int64_t end = std::min<int64_t>(begin + per, n);
        if (begin < end) (*job)(begin, end);
        {
          std::lock_guard<std::mutex> lk(mutex_);
          --pending_;
          if (pending_ == 0) done_cv_.notify_all();
        }
      }
    }
  }

  std::mutex api_mutex_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> workers_;
  int want_threads_ = 1;
  bool stopping_ = false;
  const std::function<void(int64_t, int64_t)>* job_ = nullptr;
  int64_t job_n_ = 0, job_per_ = 0;
  int job_chunks_ = 0;
  int next_chunk_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
};

inline void set_num_threads(int n) { ThreadPool::instance().resize(n); }
inline int num_threads() { return ThreadPool::instance().size(); }

inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  ThreadPool::instance().run(n, body);
}

}  // namespace magicvid
