#include "armamba/threadpool.hpp"

#include <algorithm>

namespace armamba {

ThreadPool& ThreadPool::instance() {
  static ThreadPool pool;
  return pool;
}

ThreadPool::~ThreadPool() { stop_threads(); }

void ThreadPool::stop_threads() {
  {
    std::lock_guard lk(mu_);
    stop_ = true;
  }
  cv_work_.notify_all();
  for (auto& t : threads_) t.join();
  threads_.clear();
  {
    std::lock_guard lk(mu_);
    stop_ = false;
  }
}

void ThreadPool::set_workers(int n) {
  n = std::max(1, n);
  if (n == workers_) return;
  stop_threads();
  workers_ = n;
  tasks_.assign(size_t(n - 1), Task{});
  uint64_t my_gen = generation_;
  for (int i = 0; i < n - 1; ++i) {
    threads_.emplace_back([this, i, my_gen] {
      uint64_t seen = my_gen;
      for (;;) {
        Task task;
        {
          std::unique_lock lk(mu_);
          cv_work_.wait(lk, [&] { return stop_ || generation_ != seen; });
          if (stop_) return;
          seen = generation_;
          task = tasks_[size_t(i)];
        }
        if (task.fn && task.begin < task.end) (*task.fn)(task.begin, task.end);
        {
          std::lock_guard lk(mu_);
          if (--pending_ == 0) cv_done_.notify_one();
        }
      }
    });
  }
}

void ThreadPool::parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int w = std::min<int64_t>(workers_, n);
  if (w <= 1) {
    fn(0, n);
    return;
  }
  int64_t chunk = (n + w - 1) / w;
  int64_t my_begin = 0, my_end = std::min<int64_t>(chunk, n);
  {
    std::lock_guard lk(mu_);
    // every worker observes the generation bump exactly once and decrements
    pending_ = int(threads_.size());
    for (size_t i = 0; i < tasks_.size(); ++i) {
      int64_t b = int64_t(i + 1) * chunk, e = std::min<int64_t>(b + chunk, n);
      tasks_[i] = (b < e) ? Task{&fn, b, e} : Task{};
    }
    ++generation_;
  }
  cv_work_.notify_all();
  fn(my_begin, my_end);
  std::unique_lock lk(mu_);
  cv_done_.wait(lk, [&] { return pending_ == 0; });
}

}  // namespace armamba
