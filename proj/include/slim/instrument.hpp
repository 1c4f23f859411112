#pragma once

// Allocation and operation-count instrumentation.
//
// Every tensor buffer is allocated through TrackedAllocator, which charges
// its bytes to the calling thread's AllocStats under the memory category
// that is active at allocation time. Buffers remember their category, so a
// buffer allocated as persistent state is also released as such.
//
// Arithmetic kernels charge the calling thread's FlopLedger under the phase
// that is active when they run. Counting convention:
//   * contractions (matrix products, outer products, row dot products) count
//     one operation per multiply-add;
//   * elementwise maps, scans and reductions count one operation per element
//     they produce or consume (a fixed small multiple for fused kernels such
//     as layer normalization and cross-entropy);
//   * data movement (slices, concatenation, gathers, copies) counts zero.
// Every kernel used by the model is therefore linear in the number of rows it
// processes, which makes the totals independent of how a sequence is split.

#include <array>
#include <cstddef>
#include <cstdint>
#include <new>
#include <string_view>

namespace slim {

enum class MemoryCategory : std::uint8_t {
  kActivation = 0,
  kPersistent = 1,
};
inline constexpr std::size_t kMemoryCategoryCount = 2;

class AllocStats {
 public:
  std::int64_t live_bytes(MemoryCategory c = MemoryCategory::kActivation) const {
    return live_[index(c)];
  }
  std::int64_t peak_bytes(MemoryCategory c = MemoryCategory::kActivation) const {
    return peak_[index(c)];
  }
  std::int64_t clamp_events() const { return clamp_events_; }

  // Restores the high-water marks to the current live values.
  void reset_peak() { peak_ = live_; }
  void reset_clamp_events() { clamp_events_ = 0; }

  void on_allocate(std::size_t bytes, MemoryCategory c) {
    auto i = index(c);
    live_[i] += static_cast<std::int64_t>(bytes);
    if (live_[i] > peak_[i]) peak_[i] = live_[i];
  }
  void on_release(std::size_t bytes, MemoryCategory c) {
    live_[index(c)] -= static_cast<std::int64_t>(bytes);
  }
  void on_clamp(std::int64_t n = 1) { clamp_events_ += n; }

 private:
  static std::size_t index(MemoryCategory c) { return static_cast<std::size_t>(c); }

  std::array<std::int64_t, kMemoryCategoryCount> live_{};
  std::array<std::int64_t, kMemoryCategoryCount> peak_{};
  std::int64_t clamp_events_ = 0;
};

// Per-thread statistics.
AllocStats& alloc_stats();

MemoryCategory current_memory_category();

// Routes allocations made in its lifetime to `category`.
class MemoryCategoryScope {
 public:
  explicit MemoryCategoryScope(MemoryCategory category);
  ~MemoryCategoryScope();
  MemoryCategoryScope(const MemoryCategoryScope&) = delete;
  MemoryCategoryScope& operator=(const MemoryCategoryScope&) = delete;

 private:
  MemoryCategory saved_;
};

namespace detail {

// Each tracked block is prefixed by a header recording its size and category.
inline constexpr std::size_t kAllocHeader = 16;

void* tracked_allocate(std::size_t bytes);
void tracked_release(void* p) noexcept;

}  // namespace detail

template <typename T>
struct TrackedAllocator {
  using value_type = T;

  TrackedAllocator() noexcept = default;
  template <typename U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(detail::tracked_allocate(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t) noexcept { detail::tracked_release(p); }

  template <typename U>
  bool operator==(const TrackedAllocator<U>&) const noexcept {
    return true;
  }
};

// ---------------------------------------------------------------------------
// Operation counting.

enum class FlopPhase : std::uint8_t {
  kForward = 0,   // first pass over the data
  kBackward = 1,  // vector-Jacobian products
  kReplay = 2,    // forward recomputation during the low-memory backward
  kRewind = 3,    // boundary-state recovery
  kBoundary = 4,  // per-chunk work: the Phi coupling term and B updates
  kOther = 5,
};
inline constexpr std::size_t kFlopPhaseCount = 6;

std::string_view to_string(FlopPhase phase);

class FlopLedger {
 public:
  void charge(std::uint64_t n) { counts_[static_cast<std::size_t>(phase_)] += n; }
  void charge(FlopPhase phase, std::uint64_t n) {
    counts_[static_cast<std::size_t>(phase)] += n;
  }
  std::uint64_t count(FlopPhase phase) const {
    return counts_[static_cast<std::size_t>(phase)];
  }
  std::uint64_t total() const;
  FlopPhase phase() const { return phase_; }
  void set_phase(FlopPhase phase) { phase_ = phase; }
  void reset() { counts_ = {}; }

 private:
  std::array<std::uint64_t, kFlopPhaseCount> counts_{};
  FlopPhase phase_ = FlopPhase::kForward;
};

// Per-thread ledger.
FlopLedger& flop_ledger();

inline void charge_flops(std::uint64_t n) { flop_ledger().charge(n); }

class FlopPhaseScope {
 public:
  explicit FlopPhaseScope(FlopPhase phase) : saved_(flop_ledger().phase()) {
    flop_ledger().set_phase(phase);
  }
  ~FlopPhaseScope() { flop_ledger().set_phase(saved_); }
  FlopPhaseScope(const FlopPhaseScope&) = delete;
  FlopPhaseScope& operator=(const FlopPhaseScope&) = delete;

 private:
  FlopPhase saved_;
};

}  // namespace slim
