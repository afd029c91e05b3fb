#pragma once

#include <cstdint>
#include <vector>

#include "circtree/errors.hpp"
#include "circtree/layout.hpp"

namespace circtree {

// Classic sorted node: valid pairs occupy slots 0..count-1 from the zero
// offset. Insertion shifts every greater pair one slot right; deletion
// shifts left. Dirty lines are flushed once each, following the store
// order of the shift (right-to-left for insert, left-to-right for delete),
// with a fence after every flush.
class LinearNode : public NodeView {
 public:
  LinearNode() = default;
  LinearNode(PmArena* a, uint64_t off, uint32_t capacity) : NodeView(a, off, capacity) {}
  explicit LinearNode(const NodeView& v) : NodeView(v) {}

  static LinearNode create(PmArena& a, uint32_t capacity, uint32_t level) {
    return LinearNode(create_node(a, capacity, level));
  }

  bool full() const { return count() >= cap_; }
  bool empty() const { return count() == 0; }

  uint64_t min_key() const { return slot_key(0); }
  uint64_t max_key() const { return slot_key(count() - 1); }

  SearchResult search(uint64_t k) const {
    uint32_t n = count();
    for (uint32_t j = 0; j < n; ++j) {
      uint64_t key = slot_key(j);
      if (key == k) return {true, j, slot_value(j)};
      if (key > k) return {false, j, 0};
    }
    return {false, n, 0};
  }

  void insert(uint64_t k, uint64_t v) {
    if (v == 0) throw contract_error("insert: value must be non-zero");
    uint32_t n = count(), P = pairs_per_line();
    if (n >= cap_) throw node_full_error("insert: node is full");
    SearchResult r = search(k);
    if (r.found) throw duplicate_key_error("insert: key exists");
    uint32_t pos = r.pos;
    for (int64_t j = int64_t{n} - 1; j >= pos; --j) {
      uint32_t src = static_cast<uint32_t>(j), dst = src + 1;
      write_pair_value_first(dst, slot_key(src), slot_value(src));
      arena_->count_shift();
      if (dst % P == 0) {
        flush_slot_line(dst);
        arena_->fence();
      }
    }
    write_pair_key_first(pos, k, v);
    flush_slot_line(pos);
    arena_->fence();
    set_base_count_atomic(0, n + 1);
    flush_header();
    arena_->fence();
  }

  void erase(uint64_t k) {
    SearchResult r = search(k);
    if (!r.found) throw contract_error("erase: key not found");
    uint32_t n = count(), P = pairs_per_line();
    uint32_t pos = r.pos;
    for (uint32_t j = pos; j + 1 < n; ++j) {
      write_pair_value_first(j, slot_key(j + 1), slot_value(j + 1));
      arena_->count_shift();
      if (j % P == P - 1) {
        flush_slot_line(j);
        arena_->fence();
      }
    }
    clear_slot(n - 1);
    flush_slot_line(n - 1);
    arena_->fence();
    set_base_count_atomic(0, n - 1);
    flush_header();
    arena_->fence();
  }

  void update_value(uint64_t k, uint64_t v) {
    if (v == 0) throw contract_error("update_value: value must be non-zero");
    SearchResult r = search(k);
    if (!r.found) throw contract_error("update_value: key not found");
    arena_->write_atomic8(array_handle(), uint64_t{r.pos} * layout::kPairBytes + 8, v);
    flush_slot_line(r.pos);
    arena_->fence();
  }

  std::vector<KvPair> logical_view() const {
    uint32_t n = count();
    std::vector<KvPair> out;
    out.reserve(n);
    for (uint32_t j = 0; j < n; ++j) out.push_back(slot(j));
    return out;
  }
};

}  // namespace circtree
