#pragma once

#include <algorithm>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace nrgs {

/// Fixed chunk count independent of the worker count, so any reduction over
/// per-chunk buffers is bitwise reproducible across machines and thread pools.
inline constexpr int kParallelChunks = 8;

namespace detail {

/// Lazily started persistent workers; spawning threads per call costs more
/// than the work at desk-scale image sizes.
class ChunkPool {
 public:
  static ChunkPool& instance() {
    static ChunkPool pool;
    return pool;
  }

  void run(int count, const std::function<void(int, int, int)>& fn, int workers) {
    const int chunkSize = (count + kParallelChunks - 1) / kParallelChunks;
    ensureWorkers(workers - 1);
    {
      std::unique_lock lock(m_);
      fn_ = &fn;
      count_ = count;
      chunkSize_ = chunkSize;
      nextChunk_ = 0;
      pending_ = kParallelChunks;
      ++generation_;
    }
    cv_.notify_all();
    work();  // caller participates
    std::unique_lock lock(m_);
    done_.wait(lock, [&] { return pending_ == 0; });
    fn_ = nullptr;
  }

 private:
  void ensureWorkers(int n) {
    n = std::clamp(n, 0, kParallelChunks - 1);
    while (static_cast<int>(threads_.size()) < n)
      threads_.emplace_back([this] { workerLoop(); });
  }

  void workerLoop() {
    uint64_t seen = 0;
    while (true) {
      {
        std::unique_lock lock(m_);
        cv_.wait(lock, [&] { return stop_ || (fn_ && generation_ != seen && nextChunk_ < kParallelChunks); });
        if (stop_) return;
        seen = generation_;
      }
      work();
    }
  }

  void work() {
    while (true) {
      int chunk;
      const std::function<void(int, int, int)>* fn;
      int count, chunkSize;
      {
        std::unique_lock lock(m_);
        if (!fn_ || nextChunk_ >= kParallelChunks) return;
        chunk = nextChunk_++;
        fn = fn_;
        count = count_;
        chunkSize = chunkSize_;
      }
      const int b = chunk * chunkSize, e = std::min(count, b + chunkSize);
      if (b < e) (*fn)(chunk, b, e);
      {
        std::unique_lock lock(m_);
        if (--pending_ == 0) done_.notify_all();
      }
    }
  }

  ~ChunkPool() {
    {
      std::unique_lock lock(m_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  std::mutex m_;
  std::condition_variable cv_, done_;
  std::vector<std::thread> threads_;
  const std::function<void(int, int, int)>* fn_ = nullptr;
  int count_ = 0, chunkSize_ = 0, nextChunk_ = kParallelChunks, pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace detail

/// Runs fn(chunk, begin, end) over [0, count) split into kParallelChunks
/// contiguous ranges. Workers default to hardware concurrency.
inline void parallelChunks(int count, const std::function<void(int, int, int)>& fn, int workers = 0) {
  if (count <= 0) return;
  if (workers <= 0) workers = static_cast<int>(std::thread::hardware_concurrency());
  workers = std::clamp(workers, 1, kParallelChunks);

  const int chunkSize = (count + kParallelChunks - 1) / kParallelChunks;
  if (workers == 1) {
    for (int c = 0; c < kParallelChunks; ++c) {
      const int b = c * chunkSize, e = std::min(count, b + chunkSize);
      if (b < e) fn(c, b, e);
    }
    return;
  }
  detail::ChunkPool::instance().run(count, fn, workers);
}

}  // namespace nrgs
