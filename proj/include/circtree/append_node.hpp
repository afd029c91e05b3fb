#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "circtree/errors.hpp"
#include "circtree/layout.hpp"

namespace circtree {

// Append-only leaf: a log of flagged entries, 24 bytes each (flag, key,
// value), replayed front to back to determine the live state. The validity
// flag costs capacity: the same byte budget holds node_bytes/24 entries
// instead of node_bytes/16 pairs. The entry counter is volatile cache
// state; durability comes from the flag word, written after key and value.
class AppendNode : public NodeView {
 public:
  static constexpr uint64_t kEntryBytes = 24;
  static constexpr uint64_t kFlagInsert = 1;
  static constexpr uint64_t kFlagDelete = 2;

  struct ReplayResult {
    bool present = false;
    uint64_t value = 0;
    uint32_t entries_scanned = 0;
  };

  AppendNode() = default;
  AppendNode(PmArena* a, uint64_t off, uint32_t capacity) : NodeView(a, off, capacity) {}
  explicit AppendNode(const NodeView& v) : NodeView(v) {}

  static AppendNode create(PmArena& a, uint32_t capacity, uint32_t level) {
    return AppendNode(create_node(a, capacity, level));
  }

  uint32_t entry_capacity() const {
    return static_cast<uint32_t>(uint64_t{cap_} * layout::kPairBytes / kEntryBytes);
  }

  uint32_t entry_count() const {
    return static_cast<uint32_t>(arena_->volatile_load_u64(off_ + layout::kWordBaseCount * 8) &
                                 0xffffffffu);
  }

  bool full() const { return entry_count() >= entry_capacity(); }

  // Number of live pairs after replay.
  uint32_t live_count() const { return static_cast<uint32_t>(live_pairs().size()); }

  ReplayResult replay(uint64_t k) const {
    uint32_t n = entry_count();
    ReplayResult r;
    for (uint32_t e = 0; e < n; ++e) {
      ++r.entries_scanned;
      uint64_t flag = entry_word(e, 0);
      if (entry_word(e, 1) != k) continue;
      if (flag == kFlagInsert) {
        r.present = true;
        r.value = entry_word(e, 2);
      } else if (flag == kFlagDelete) {
        r.present = false;
        r.value = 0;
      }
    }
    return r;
  }

  void insert(uint64_t k, uint64_t v) {
    if (v == 0) throw contract_error("insert: value must be non-zero");
    if (full()) throw node_full_error("insert: append log is full");
    if (replay(k).present) throw duplicate_key_error("insert: key exists");
    append(kFlagInsert, k, v);
  }

  void erase(uint64_t k) {
    if (!replay(k).present) throw contract_error("erase: key not found");
    if (full()) throw node_full_error("erase: append log is full");
    append(kFlagDelete, k, 0);
  }

  void update_value(uint64_t k, uint64_t v) {
    if (v == 0) throw contract_error("update_value: value must be non-zero");
    if (!replay(k).present) throw contract_error("update_value: key not found");
    if (full()) throw node_full_error("update_value: append log is full");
    append(kFlagInsert, k, v);
  }

  // Live state sorted by key.
  std::vector<KvPair> live_pairs() const {
    std::map<uint64_t, uint64_t> state;
    uint32_t n = entry_count();
    for (uint32_t e = 0; e < n; ++e) {
      uint64_t flag = entry_word(e, 0);
      uint64_t k = entry_word(e, 1);
      if (flag == kFlagInsert)
        state[k] = entry_word(e, 2);
      else if (flag == kFlagDelete)
        state.erase(k);
    }
    std::vector<KvPair> out;
    out.reserve(state.size());
    for (auto& [k, v] : state) out.push_back({k, v});
    return out;
  }

  uint64_t min_live_key() const { return live_pairs().front().key; }

 private:
  uint64_t entry_abs(uint32_t e, uint32_t word) const {
    return array_abs() + uint64_t{e} * kEntryBytes + word * 8;
  }

  uint64_t entry_word(uint32_t e, uint32_t word) const {
    return arena_->read_u64_abs(entry_abs(e, word));
  }

  // Key and value land before the flag; the flag store commits the entry.
  void append(uint64_t flag, uint64_t k, uint64_t v) {
    uint32_t e = entry_count();
    Handle a = Handle{array_abs(), uint64_t{cap_} * layout::kPairBytes};
    uint64_t off = uint64_t{e} * kEntryBytes;
    arena_->write_u64(a, off + 8, k);
    arena_->write_u64(a, off + 16, v);
    arena_->write_u64(a, off, flag);
    arena_->flush_range(a, off, kEntryBytes);
    arena_->fence();
    arena_->volatile_store_u64(off_ + layout::kWordBaseCount * 8, e + 1);
  }
};

}  // namespace circtree
