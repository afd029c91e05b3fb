#pragma once

#include <cstdint>
#include <thread>

#include "circtree/pmem.hpp"

namespace circtree {

struct KvPair {
  uint64_t key = 0;
  uint64_t value = 0;  // 0 marks an empty/invalid slot

  friend bool operator==(const KvPair&, const KvPair&) = default;
};

// Durable node block layout, shared by every tree kind.
//
//   word 0: pointer to the KV array (absolute byte offset)
//   word 1: (base << 32) | nkeys   -- updated together with one 8B store
//   word 2: lock word (volatile semantics, zeroed on recovery)
//   word 3: right sibling (absolute node offset, 0 = none)
//   word 4: leftmost child (internal nodes only)
//   word 5: level (0 = leaf)
//
// The KV array starts at the next cache-line boundary after the header so
// the two never share a line. A slot is key (8B) then value (8B).
namespace layout {

inline constexpr uint64_t kWordArray = 0;
inline constexpr uint64_t kWordBaseCount = 1;
inline constexpr uint64_t kWordLock = 2;
inline constexpr uint64_t kWordSibling = 3;
inline constexpr uint64_t kWordLeftmost = 4;
inline constexpr uint64_t kWordLevel = 5;
inline constexpr uint64_t kAuxBytes = 48;
inline constexpr uint64_t kPairBytes = 16;

inline uint64_t array_offset(uint32_t line_size) {
  return (kAuxBytes + line_size - 1) / line_size * line_size;
}

inline uint64_t node_block_bytes(uint32_t capacity, uint32_t line_size) {
  return array_offset(line_size) + uint64_t{capacity} * kPairBytes;
}

inline uint64_t pack_base_count(uint32_t base, uint32_t count) {
  return (uint64_t{base} << 32) | count;
}

}  // namespace layout

// Lightweight view of a node block. Copyable; does not own anything.
class NodeView {
 public:
  NodeView() = default;
  NodeView(PmArena* a, uint64_t off, uint32_t capacity)
      : arena_(a), off_(off), cap_(capacity) {}

  PmArena* arena() const { return arena_; }
  uint64_t offset() const { return off_; }
  uint32_t capacity() const { return cap_; }
  explicit operator bool() const { return arena_ != nullptr && off_ != 0; }

  Handle block() const {
    return Handle{off_, layout::node_block_bytes(cap_, arena_->line_size())};
  }

  uint64_t word(uint64_t idx) const { return arena_->read_u64(block(), idx * 8); }

  uint64_t array_abs() const { return word(layout::kWordArray); }
  uint64_t sibling() const { return word(layout::kWordSibling); }
  uint64_t leftmost() const { return word(layout::kWordLeftmost); }
  uint32_t level() const { return static_cast<uint32_t>(word(layout::kWordLevel)); }
  bool is_leaf() const { return level() == 0; }

  uint32_t base() const { return static_cast<uint32_t>(word(layout::kWordBaseCount) >> 32); }
  uint32_t count() const {
    return static_cast<uint32_t>(word(layout::kWordBaseCount) & 0xffffffffu);
  }

  // Single 8B store committing base and count together.
  void set_base_count_atomic(uint32_t base, uint32_t count) {
    arena_->write_atomic8(block(), layout::kWordBaseCount * 8,
                          layout::pack_base_count(base, count));
  }

  void set_sibling_atomic(uint64_t node_off) {
    arena_->write_atomic8(block(), layout::kWordSibling * 8, node_off);
  }

  void set_leftmost_atomic(uint64_t node_off) {
    arena_->write_atomic8(block(), layout::kWordLeftmost * 8, node_off);
  }

  void flush_header() { arena_->flush_range(block(), 0, layout::kAuxBytes); }

  // ---- slots -------------------------------------------------------------

  uint64_t slot_abs(uint32_t slot) const { return array_abs() + uint64_t{slot} * layout::kPairBytes; }

  uint64_t slot_key(uint32_t slot) const {
    return arena_->read_u64_abs(slot_abs(slot));
  }
  uint64_t slot_value(uint32_t slot) const {
    return arena_->read_u64_abs(slot_abs(slot) + 8);
  }
  KvPair slot(uint32_t s) const { return KvPair{slot_key(s), slot_value(s)}; }

  Handle array_handle() const {
    return Handle{array_abs(), uint64_t{cap_} * layout::kPairBytes};
  }

  // New-pair write: key first, then value. The value store is the commit
  // point, so a partially persisted slot reads as invalid (value 0).
  void write_pair_key_first(uint32_t s, uint64_t k, uint64_t v) {
    Handle a = array_handle();
    uint64_t off = uint64_t{s} * layout::kPairBytes;
    arena_->write_u64(a, off, k);
    arena_->write_u64(a, off + 8, v);
  }

  // Shift copy: value first, then key. A partially persisted copy leaves a
  // duplicate value behind, which recovery detects.
  void write_pair_value_first(uint32_t s, uint64_t k, uint64_t v) {
    Handle a = array_handle();
    uint64_t off = uint64_t{s} * layout::kPairBytes;
    arena_->write_u64(a, off + 8, v);
    arena_->write_u64(a, off, k);
  }

  // Clear: value first so the slot stops being valid before the key goes.
  void clear_slot(uint32_t s) {
    Handle a = array_handle();
    uint64_t off = uint64_t{s} * layout::kPairBytes;
    arena_->write_u64(a, off + 8, 0);
    arena_->write_u64(a, off, 0);
  }

  void flush_slot_line(uint32_t s) {
    uint64_t abs = slot_abs(s);
    uint64_t line = abs / arena_->line_size() * arena_->line_size();
    arena_->flush_line(Handle{line, arena_->line_size()}, 0);
  }

  uint64_t slot_line(uint32_t s) const { return slot_abs(s) / arena_->line_size(); }

  uint32_t pairs_per_line() const { return arena_->line_size() / layout::kPairBytes; }

  // ---- lock word (volatile) ----------------------------------------------

  uint64_t lock_abs() const { return off_ + layout::kWordLock * 8; }

  void lock() {
    for (int spins = 0;; ++spins) {
      if (arena_->volatile_cas_u64(lock_abs(), 0, 1)) return;
      if (spins > 64) std::this_thread::yield();
    }
  }

  bool try_lock() { return arena_->volatile_cas_u64(lock_abs(), 0, 1); }

  void unlock() { arena_->volatile_store_u64(lock_abs(), 0); }

  void reset_lock() { arena_->volatile_store_u64(lock_abs(), 0); }

  friend bool operator==(const NodeView& a, const NodeView& b) {
    return a.off_ == b.off_;
  }

 protected:
  PmArena* arena_ = nullptr;
  uint64_t off_ = 0;
  uint32_t cap_ = 0;
};

// Allocates a zeroed node block and fills the array pointer and level.
// The caller persists the header as part of its own modification order.
inline NodeView create_node(PmArena& a, uint32_t capacity, uint32_t level) {
  uint64_t bytes = layout::node_block_bytes(capacity, a.line_size());
  Handle h = a.alloc(bytes, a.line_size());
  NodeView n(&a, h.offset, capacity);
  a.write_u64(h, layout::kWordArray * 8, h.offset + layout::array_offset(a.line_size()));
  a.write_u64(h, layout::kWordLevel * 8, level);
  return n;
}

}  // namespace circtree
