#pragma once

#include <atomic>
#include <cstddef>
#include <memory>
#include <new>

namespace evq {

/// Live-byte counter shared by every tensor buffer.  The high-water mark is
/// what the benchmark harness reports as peak allocation.
class MemoryProbe {
 public:
  static void on_alloc(std::size_t bytes) noexcept {
    const std::size_t now = live().fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t prev = peak().load(std::memory_order_relaxed);
    while (now > prev && !peak().compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
  }
  static void on_free(std::size_t bytes) noexcept { live().fetch_sub(bytes, std::memory_order_relaxed); }

  static std::size_t live_bytes() noexcept { return live().load(std::memory_order_relaxed); }
  static std::size_t peak_bytes() noexcept { return peak().load(std::memory_order_relaxed); }
  /// Restart peak tracking from the current live level.
  static void reset_peak() noexcept { peak().store(live_bytes(), std::memory_order_relaxed); }

 private:
  static std::atomic<std::size_t>& live() noexcept {
    static std::atomic<std::size_t> v{0};
    return v;
  }
  static std::atomic<std::size_t>& peak() noexcept {
    static std::atomic<std::size_t> v{0};
    return v;
  }
};

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>{}.allocate(n);
    MemoryProbe::on_alloc(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryProbe::on_free(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace evq
