#include "slim/instrument.hpp"

#include <cstdlib>
#include <cstring>

namespace slim {
namespace {

thread_local AllocStats t_alloc_stats;
thread_local MemoryCategory t_category = MemoryCategory::kActivation;
thread_local FlopLedger t_flop_ledger;

struct BlockHeader {
  std::size_t bytes;
  MemoryCategory category;
};
static_assert(sizeof(BlockHeader) <= detail::kAllocHeader);

}  // namespace

AllocStats& alloc_stats() { return t_alloc_stats; }

MemoryCategory current_memory_category() { return t_category; }

MemoryCategoryScope::MemoryCategoryScope(MemoryCategory category) : saved_(t_category) {
  t_category = category;
}

MemoryCategoryScope::~MemoryCategoryScope() { t_category = saved_; }

namespace detail {

void* tracked_allocate(std::size_t bytes) {
  void* raw = std::malloc(bytes + kAllocHeader);
  if (raw == nullptr) throw std::bad_alloc();
  BlockHeader header{bytes, t_category};
  std::memcpy(raw, &header, sizeof(header));
  t_alloc_stats.on_allocate(bytes, t_category);
  return static_cast<unsigned char*>(raw) + kAllocHeader;
}

void tracked_release(void* p) noexcept {
  if (p == nullptr) return;
  void* raw = static_cast<unsigned char*>(p) - kAllocHeader;
  BlockHeader header;
  std::memcpy(&header, raw, sizeof(header));
  t_alloc_stats.on_release(header.bytes, header.category);
  std::free(raw);
}

}  // namespace detail

std::string_view to_string(FlopPhase phase) {
  switch (phase) {
    case FlopPhase::kForward: return "forward";
    case FlopPhase::kBackward: return "backward";
    case FlopPhase::kReplay: return "replay";
    case FlopPhase::kRewind: return "rewind";
    case FlopPhase::kBoundary: return "boundary";
    case FlopPhase::kOther: return "other";
  }
  return "unknown";
}

std::uint64_t FlopLedger::total() const {
  std::uint64_t sum = 0;
  for (auto c : counts_) sum += c;
  return sum;
}

FlopLedger& flop_ledger() { return t_flop_ledger; }

}  // namespace slim
