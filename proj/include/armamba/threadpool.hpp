#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace armamba {

// Persistent worker pool. Work is always partitioned over *output* ranges so
// every element is written by exactly one worker with a fixed per-element
// reduction order; results are therefore bit-identical for any worker count.
class ThreadPool {
 public:
  static ThreadPool& instance();

  // Resize the pool. n is the total worker count incl. the calling thread.
  void set_workers(int n);
  int workers() const { return workers_; }

  // fn(begin, end) over [0, n) split into contiguous ranges.
  void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

  ~ThreadPool();

 private:
  ThreadPool() = default;
  void stop_threads();

  struct Task {
    const std::function<void(int64_t, int64_t)>* fn = nullptr;
    int64_t begin = 0, end = 0;
  };

  std::vector<std::thread> threads_;
  std::vector<Task> tasks_;
  std::mutex mu_;
  std::condition_variable cv_work_, cv_done_;
  uint64_t generation_ = 0;
  int pending_ = 0;
  bool stop_ = false;
  int workers_ = 1;
};

inline void set_num_workers(int n) { ThreadPool::instance().set_workers(n); }
inline int num_workers() { return ThreadPool::instance().workers(); }

}  // namespace armamba
