#pragma once

#include <bit>
#include <cstdint>
#include <vector>

#include "circtree/errors.hpp"
#include "circtree/layout.hpp"

namespace circtree {

// Slot index of logical offset i from base b in an array of N = 2^m slots.
inline uint32_t circ_index(uint32_t b, uint32_t i, uint32_t N) {
  if (!std::has_single_bit(N) || N < 2)
    throw contract_error("circ_index: capacity must be a power of two > 1");
  return (b + i) & (N - 1);
}

struct SearchResult {
  bool found = false;
  uint32_t pos = 0;  // logical position of the match, or the insertion point
  uint64_t value = 0;
};

// Records which physical slots a search read. The boundary slot is the
// single probe used to pick a segment in the wrapped case; the scan itself
// must stay inside one physically contiguous range.
struct SearchProbe {
  std::vector<uint32_t> scanned;
  int64_t boundary_slot = -1;
};

// Flushes each dirty line once, in the order the writes crossed them.
class LineTracker {
 public:
  explicit LineTracker(PmArena* a) : arena_(a) {}

  void touch(uint64_t line) {
    if (has_ && line == last_) return;
    if (has_) flush(last_);
    last_ = line;
    has_ = true;
  }

  void finish() {
    if (has_) flush(last_);
    has_ = false;
  }

 private:
  void flush(uint64_t line) {
    uint64_t base = line * arena_->line_size();
    arena_->flush_line(Handle{base, arena_->line_size()}, 0);
  }

  PmArena* arena_;
  uint64_t last_ = 0;
  bool has_ = false;
};

// Circular node: N = 2^m fixed-size KV slots plus the 32B header. The
// nkeys valid pairs sit at slots base, base+1, ... modulo N, keys strictly
// increasing; all other slots are zero.
class CircNode : public NodeView {
 public:
  CircNode() = default;
  CircNode(PmArena* a, uint64_t off, uint32_t capacity) : NodeView(a, off, capacity) {}
  explicit CircNode(const NodeView& v) : NodeView(v) {}

  static CircNode create(PmArena& a, uint32_t capacity, uint32_t level) {
    if (!std::has_single_bit(capacity) || capacity < 2)
      throw contract_error("node capacity must be a power of two > 1");
    return CircNode(create_node(a, capacity, level));
  }

  bool full() const { return count() >= cap_; }
  bool empty() const { return count() == 0; }

  uint64_t min_key() const { return slot_key(base()); }
  uint64_t max_key() const { return slot_key(circ_index(base(), count() - 1, cap_)); }

  uint32_t pos_slot(uint32_t pos) const { return circ_index(base(), pos, cap_); }

  // Search only one physically contiguous segment. With a wrapped run the
  // key at physical slot 0 decides which segment holds the target.
  SearchResult search(uint64_t k, SearchProbe* probe = nullptr) const {
    uint32_t n = count(), b = base();
    if (n == 0) return {};
    if (uint64_t{b} + n <= cap_) return scan_segment(b, n, 0, k, probe);
    uint32_t first_len = cap_ - b;
    if (probe) probe->boundary_slot = 0;
    if (k < slot_key(0)) return scan_segment(b, first_len, 0, k, probe);
    return scan_segment(0, b + n - cap_, first_len, k, probe);
  }

  // Insertion with bidirectional shifting. Direction comes from comparing
  // the new key with the key at the middle logical position; the smaller
  // side shifts by one slot. A line is flushed as soon as the moving
  // cursor leaves it; the new pair's line and then the header line follow.
  void insert(uint64_t k, uint64_t v) {
    if (v == 0) throw contract_error("insert: value must be non-zero");
    uint32_t n = count(), b = base(), N = cap_, P = pairs_per_line();
    if (n >= N) throw node_full_error("insert: node is full");
    uint64_t mid_key = slot_key(circ_index(b, n / 2, N));
    if (n > 0 && k < mid_key) {
      int64_t i = 0;
      for (; i < int64_t{n} / 2; ++i) {
        uint32_t idx = circ_index(b, static_cast<uint32_t>(i), N);
        uint64_t key = slot_key(idx);
        if (k > key) {
          uint32_t dst = (idx + N - 1) & (N - 1);
          write_pair_value_first(dst, key, slot_value(idx));
          arena_->count_shift();
          if (idx % P == 0) flush_slot_line(dst);
        } else {
          if (key == k) throw duplicate_key_error("insert: key exists");
          break;
        }
      }
      uint32_t place =
          static_cast<uint32_t>((uint64_t{b} + static_cast<uint64_t>(i) + N - 1) & (N - 1));
      write_pair_key_first(place, k, v);
      flush_slot_line(place);
      set_base_count_atomic((b + N - 1) & (N - 1), n + 1);
    } else {
      int64_t i = int64_t{n} - 1;
      for (; i >= int64_t{n} / 2; --i) {
        uint32_t idx = circ_index(b, static_cast<uint32_t>(i), N);
        uint64_t key = slot_key(idx);
        if (k < key) {
          uint32_t dst = (idx + 1) & (N - 1);
          write_pair_value_first(dst, key, slot_value(idx));
          arena_->count_shift();
          if (dst % P == 0) flush_slot_line(dst);
        } else {
          if (key == k) throw duplicate_key_error("insert: key exists");
          break;
        }
      }
      uint32_t place = static_cast<uint32_t>((uint64_t{b} + static_cast<uint64_t>(i + 1)) & (N - 1));
      write_pair_key_first(place, k, v);
      flush_slot_line(place);
      set_base_count_atomic(b, n + 1);
    }
    flush_header();
    arena_->fence();
  }

  // Deletion. End keys are cleared in place; an interior key shifts the
  // smaller of the two sides toward the hole and clears the freed end.
  void erase(uint64_t k) {
    SearchResult r = search(k);
    if (!r.found) throw contract_error("erase: key not found");
    uint32_t n = count(), b = base(), N = cap_;
    uint32_t pos = r.pos;
    if (pos == 0) {
      clear_slot(b);
      flush_slot_line(b);
      set_base_count_atomic(circ_index(b, 1, N), n - 1);
    } else if (pos == n - 1) {
      uint32_t s = circ_index(b, n - 1, N);
      clear_slot(s);
      flush_slot_line(s);
      set_base_count_atomic(b, n - 1);
    } else if (k >= slot_key(circ_index(b, n / 2, N))) {
      LineTracker lt(arena_);
      for (uint32_t j = pos + 1; j < n; ++j) {
        uint32_t src = circ_index(b, j, N), dst = circ_index(b, j - 1, N);
        write_pair_value_first(dst, slot_key(src), slot_value(src));
        arena_->count_shift();
        lt.touch(slot_line(dst));
      }
      uint32_t tail = circ_index(b, n - 1, N);
      clear_slot(tail);
      lt.touch(slot_line(tail));
      lt.finish();
      set_base_count_atomic(b, n - 1);
    } else {
      LineTracker lt(arena_);
      for (int64_t j = int64_t{pos} - 1; j >= 0; --j) {
        uint32_t src = circ_index(b, static_cast<uint32_t>(j), N);
        uint32_t dst = circ_index(b, static_cast<uint32_t>(j) + 1, N);
        write_pair_value_first(dst, slot_key(src), slot_value(src));
        arena_->count_shift();
        lt.touch(slot_line(dst));
      }
      clear_slot(b);
      lt.touch(slot_line(b));
      lt.finish();
      set_base_count_atomic(circ_index(b, 1, N), n - 1);
    }
    flush_header();
    arena_->fence();
  }

  // In-place value swap for an existing key: one atomic 8B store.
  void update_value(uint64_t k, uint64_t v) {
    if (v == 0) throw contract_error("update_value: value must be non-zero");
    SearchResult r = search(k);
    if (!r.found) throw contract_error("update_value: key not found");
    uint32_t s = pos_slot(r.pos);
    arena_->write_atomic8(array_handle(), uint64_t{s} * layout::kPairBytes + 8, v);
    flush_slot_line(s);
    arena_->fence();
  }

  std::vector<KvPair> logical_view() const {
    uint32_t n = count(), b = base();
    std::vector<KvPair> out;
    out.reserve(n);
    for (uint32_t i = 0; i < n; ++i) out.push_back(slot(circ_index(b, i, cap_)));
    return out;
  }

 private:
  SearchResult scan_segment(uint32_t start, uint32_t len, uint32_t logical_base, uint64_t k,
                            SearchProbe* probe) const {
    for (uint32_t j = 0; j < len; ++j) {
      uint32_t s = start + j;
      if (probe) probe->scanned.push_back(s);
      uint64_t key = slot_key(s);
      if (key == k) return {true, logical_base + j, slot_value(s)};
      if (key > k) return {false, logical_base + j, 0};
    }
    return {false, logical_base + len, 0};
  }
};

}  // namespace circtree
