#include "cmtboost/parallel.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace cmtboost {

namespace {

int resolve_thread_count() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("CMTBOOST_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) hw = std::min(hw, cap);
  }
  return hw;
}

// Nested parallel_for runs serially instead of corrupting the pool state.
thread_local bool g_inside_task = false;

// Persistent pool; spawning threads per conv call would dominate small ops.
class Pool {
 public:
  static Pool& instance() {
    static Pool pool(resolve_thread_count() - 1);
    return pool;
  }

  int width() const { return static_cast<int>(workers_.size()) + 1; }

  void run(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    const int t = width();
    if (t == 1 || n < 2 || g_inside_task) {
      if (n > 0) fn(0, n);
      return;
    }
    std::size_t chunk = (n + t - 1) / t;
    {
      std::unique_lock<std::mutex> lock(mu_);
      fn_ = &fn;
      n_ = n;
      chunk_ = chunk;
      pending_ = 0;
      for (std::size_t i = 1; i < static_cast<std::size_t>(t); ++i) {
        if (i * chunk < n) ++pending_;
      }
      ++epoch_;
    }
    cv_.notify_all();
    g_inside_task = true;
    fn(0, std::min(chunk, n));
    g_inside_task = false;
    std::unique_lock<std::mutex> lock(mu_);
    done_cv_.wait(lock, [&] { return pending_ == 0; });
    fn_ = nullptr;
  }

 private:
  explicit Pool(int extra) {
    for (int i = 0; i < extra; ++i) {
      workers_.emplace_back([this, slot = static_cast<std::size_t>(i) + 1] { worker(slot); });
    }
  }

  ~Pool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      stop_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  void worker(std::size_t slot) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t, std::size_t)>* fn = nullptr;
      std::size_t begin = 0, end = 0;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [&] { return stop_ || epoch_ != seen; });
        seen = epoch_;
        if (stop_) return;
        begin = slot * chunk_;
        if (begin >= n_ || fn_ == nullptr) continue;
        end = std::min(begin + chunk_, n_);
        fn = fn_;
      }
      g_inside_task = true;
      (*fn)(begin, end);
      g_inside_task = false;
      {
        std::unique_lock<std::mutex> lock(mu_);
        if (--pending_ == 0) done_cv_.notify_one();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(std::size_t, std::size_t)>* fn_ = nullptr;
  std::size_t n_ = 0;
  std::size_t chunk_ = 0;
  int pending_ = 0;
  std::uint64_t epoch_ = 0;
  bool stop_ = false;
};

}  // namespace

int thread_count() { return Pool::instance().width(); }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
  Pool::instance().run(n, fn);
}

}  // namespace cmtboost
