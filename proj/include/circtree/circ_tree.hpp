#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "circtree/circ_node.hpp"
#include "circtree/errors.hpp"

namespace circtree {

enum class OpKind : uint8_t {
  inserted,
  deleted,
  found,
  not_found,
  split_performed,
  merge_performed,
};

struct OpOutcome {
  OpKind kind;
  uint64_t value = 0;
};

// circ_ls keeps the circular layout but scans logically from the base,
// jumping across the wrap, instead of picking one contiguous segment.
enum class SearchMode : uint8_t { contiguous, plain };

struct RecoveryFix {
  std::string tag;
  uint64_t node = 0;
};

struct RecoveryReport {
  bool ran = false;
  std::vector<RecoveryFix> fixes;

  bool has(const std::string& tag) const {
    for (auto& f : fixes)
      if (f.tag == tag) return true;
    return false;
  }
};

// B+-tree over circular nodes in a PmArena.
//
// Durable tree metadata lives in a dedicated block (the first allocation):
//   word 0: root node offset
//   word 1: head of the leaf linked list
//   word 2: start flag (set on open, cleared on clean close)
//   word 3: node capacity N
//
// Writers lock the target leaf; structure modifications lock child then
// parent up to the highest affected level and unlock top-down. Descent is
// lock-hop (one node at a time) with rightward walks to chase concurrent
// splits, so readers and writers never hold two locks downward. Merges
// take their extra locks (right sibling, left neighbor) with try-lock and
// give up on contention, which keeps the global order (level ascending,
// key ascending) acyclic.
class CircTree {
 public:
  static constexpr uint64_t kMetaRoot = 0;
  static constexpr uint64_t kMetaLeafHead = 8;
  static constexpr uint64_t kMetaStartFlag = 16;
  static constexpr uint64_t kMetaCapacity = 24;

  CircTree(PmArena& a, uint64_t meta_off, SearchMode mode = SearchMode::contiguous)
      : a_(&a), meta_(meta_off), mode_(mode) {
    cap_ = static_cast<uint32_t>(a_->read_u64_abs(meta_ + kMetaCapacity));
    if (!std::has_single_bit(cap_) || cap_ < 4)
      throw corruption_error("tree meta holds a bad node capacity");
  }

  // Lays out a fresh tree: meta block plus an empty root leaf.
  static CircTree create(PmArena& a, uint32_t capacity,
                         SearchMode mode = SearchMode::contiguous) {
    if (!std::has_single_bit(capacity) || capacity < 4)
      throw contract_error("node capacity must be a power of two >= 4");
    Handle meta = a.alloc(a.line_size(), a.line_size());
    CircNode root = CircNode::create(a, capacity, 0);
    a.write_u64(meta, kMetaRoot, root.offset());
    a.write_u64(meta, kMetaLeafHead, root.offset());
    a.write_u64(meta, kMetaStartFlag, 0);
    a.write_u64(meta, kMetaCapacity, capacity);
    a.flush_range(meta, 0, 32);
    root.flush_header();
    a.fence();
    return CircTree(a, meta.offset, mode);
  }

  static CircTree attach(PmArena& a, uint64_t meta_off,
                         SearchMode mode = SearchMode::contiguous) {
    return CircTree(a, meta_off, mode);
  }

  PmArena& arena() const { return *a_; }
  uint64_t meta_offset() const { return meta_; }
  uint32_t node_capacity() const { return cap_; }
  uint64_t root_offset() const { return a_->read_u64_abs(meta_ + kMetaRoot); }
  uint64_t leaf_head() const { return a_->read_u64_abs(meta_ + kMetaLeafHead); }
  uint32_t height() const { return node(root_offset()).level() + 1; }
  bool start_flag() const { return a_->read_u64_abs(meta_ + kMetaStartFlag) != 0; }

  uint64_t splits() const { return splits_.load(std::memory_order_relaxed); }
  uint64_t merges() const { return merges_.load(std::memory_order_relaxed); }

  // Sets the start flag; if a previous session left it set, runs recovery
  // first. The flag is only cleared by a clean close.
  RecoveryReport open() {
    RecoveryReport rep;
    if (start_flag()) rep = recover_now();
    set_meta(kMetaStartFlag, 1);
    return rep;
  }

  void close() { set_meta(kMetaStartFlag, 0); }

  // ---- point and range operations ---------------------------------------

  OpOutcome insert(uint64_t k, uint64_t v) {
    if (v == 0) throw contract_error("insert: value must be non-zero");
    CircNode leaf = descend_lock_leaf(k);
    SearchResult r = nsearch(leaf, k);
    if (r.found) {
      leaf.unlock();
      throw duplicate_key_error("insert: key exists");
    }
    if (!leaf.full()) {
      leaf.insert(k, v);
      leaf.unlock();
      return {OpKind::inserted};
    }
    SplitResult sr = split_leaf_core(leaf, k, v);
    splits_.fetch_add(1, std::memory_order_relaxed);
    link_into_parent(leaf, sr.separator, sr.new_node);
    leaf.unlock();
    return {OpKind::split_performed};
  }

  OpOutcome erase(uint64_t k) {
    CircNode leaf = descend_lock_leaf(k);
    SearchResult r = nsearch(leaf, k);
    if (!r.found) {
      leaf.unlock();
      return {OpKind::not_found};
    }
    leaf.erase(k);
    bool merged = false;
    if (leaf.count() < cap_ / 2 && leaf.offset() != root_offset())
      merged = try_merge_right(leaf);
    leaf.unlock();
    return {merged ? OpKind::merge_performed : OpKind::deleted};
  }

  OpOutcome find(uint64_t k) {
    CircNode leaf = descend_lock_leaf(k);
    SearchResult r = nsearch(leaf, k);
    leaf.unlock();
    if (r.found) return {OpKind::found, r.value};
    return {OpKind::not_found};
  }

  OpOutcome update_value(uint64_t k, uint64_t v) {
    if (v == 0) throw contract_error("update_value: value must be non-zero");
    CircNode leaf = descend_lock_leaf(k);
    SearchResult r = nsearch(leaf, k);
    if (!r.found) {
      leaf.unlock();
      return {OpKind::not_found};
    }
    leaf.update_value(k, v);
    leaf.unlock();
    return {OpKind::found, v};
  }

  std::vector<KvPair> scan(uint64_t k_lo, uint64_t k_hi) {
    if (k_lo > k_hi) throw contract_error("scan: k_lo must be <= k_hi");
    std::vector<KvPair> out;
    CircNode leaf = descend_lock_leaf(k_lo);
    for (;;) {
      uint32_t n = leaf.count();
      bool past_end = false;
      for (uint32_t i = 0; i < n; ++i) {
        KvPair p = leaf.slot(leaf.pos_slot(i));
        if (p.key < k_lo) continue;
        if (p.key > k_hi) {
          past_end = true;
          break;
        }
        out.push_back(p);
      }
      uint64_t next = leaf.sibling();
      leaf.unlock();
      if (past_end || next == 0) break;
      leaf = node(next);
      leaf.lock();
    }
    return out;
  }

  std::vector<KvPair> full_scan() { return scan(0, ~uint64_t{0}); }

  // ---- recovery ----------------------------------------------------------

  // Bottom-up repair pass over a crashed image. Single-threaded.
  RecoveryReport recover_now() {
    RecoveryReport rep;
    rep.ran = true;
    repair_level_chain(0, rep);
    for (uint32_t lvl = 1; lvl <= node(root_offset()).level(); ++lvl) {
      repair_level_chain(lvl, rep);
      reconcile_children(lvl, rep);
    }
    fix_root_chain(rep);
    set_meta(kMetaStartFlag, 0);
    return rep;
  }

  // ---- structural validation (tests, crash harness) ----------------------

  std::vector<std::string> validate() const {
    std::vector<std::string> problems;
    // leaf chain: per-node consistency and global ordering
    std::vector<uint64_t> chain;
    uint64_t prev_max = 0;
    bool have_prev = false;
    for (uint64_t c = leaf_head(); c != 0;) {
      CircNode nd = node(c);
      chain.push_back(c);
      if (chain.size() > 1u << 22) {
        problems.push_back("leaf chain does not terminate");
        return problems;
      }
      check_node(nd, problems);
      if (nd.count() > 0) {
        if (have_prev && nd.min_key() <= prev_max)
          problems.push_back("leaf chain keys not increasing at node " + std::to_string(c));
        prev_max = nd.max_key();
        have_prev = true;
      }
      c = nd.sibling();
    }
    // root descent must see the same leaves, with consistent fences
    std::vector<uint64_t> reached;
    CircNode root = node(root_offset());
    check_subtree(root, std::nullopt, std::nullopt, root.level(), reached, problems);
    if (reached != chain) problems.push_back("leaf chain and root descent disagree");
    if (!chain.empty() && chain.front() != leaf_head())
      problems.push_back("leaf head does not point at first leaf");
    return problems;
  }

 private:
  struct SplitResult {
    uint64_t new_node = 0;
    uint64_t separator = 0;
  };

  CircNode node(uint64_t off) const { return CircNode(a_, off, cap_); }

  Handle meta_handle() const { return Handle{meta_, 32}; }

  void set_meta(uint64_t word_off, uint64_t v) {
    a_->write_atomic8(meta_handle(), word_off, v);
    a_->flush_range(meta_handle(), 0, 32);
    a_->fence();
  }

  uint32_t internal_cap() const { return cap_ - 1; }

  SearchResult nsearch(const CircNode& nd, uint64_t k) const {
    if (mode_ == SearchMode::plain) return search_plain(nd, k);
    return nd.search(k);
  }

  SearchResult search_plain(const CircNode& nd, uint64_t k) const {
    uint32_t n = nd.count(), b = nd.base();
    for (uint32_t i = 0; i < n; ++i) {
      uint32_t s = circ_index(b, i, cap_);
      uint64_t key = nd.slot_key(s);
      if (key == k) return {true, i, nd.slot_value(s)};
      if (key > k) return {false, i, 0};
    }
    return {false, n, 0};
  }

  // ---- descent -----------------------------------------------------------

  uint64_t route_child(const CircNode& in, uint64_t k) const {
    SearchResult r = nsearch(in, k);
    if (r.found) return in.slot_value(in.pos_slot(r.pos));
    if (r.pos == 0) return in.leftmost();
    return in.slot_value(in.pos_slot(r.pos - 1));
  }

  // True when k belongs at or beyond the nearest non-empty right sibling.
  bool want_move_right(const CircNode& nd, uint64_t k) const {
    uint64_t s = nd.sibling();
    int guard = 0;
    while (s != 0 && guard++ < (1 << 20)) {
      CircNode sib = node(s);
      if (sib.count() > 0) return k >= sib.min_key();
      s = sib.sibling();
    }
    return false;
  }

  // A merged-away leaf: count reset to zero but stale pairs still in the
  // array. A cleanly emptied leaf has no valid slots and keeps its place.
  bool is_husk(const CircNode& nd) const {
    if (nd.count() != 0 || nd.sibling() == 0) return false;
    for (uint32_t s = 0; s < cap_; ++s)
      if (nd.slot_value(s) != 0) return true;
    return false;
  }

  CircNode descend_lock_leaf(uint64_t k) {
    uint64_t cur = root_offset();
    for (;;) {
      CircNode nd = node(cur);
      nd.lock();
      if (nd.level() == 0 && is_husk(nd)) {
        cur = nd.sibling();
        nd.unlock();
        continue;
      }
      if (want_move_right(nd, k)) {
        cur = nd.sibling();
        nd.unlock();
        continue;
      }
      if (nd.level() == 0) return nd;
      uint64_t child = route_child(nd, k);
      nd.unlock();
      cur = child;
    }
  }

  bool contains_child(const CircNode& p, uint64_t child) const {
    if (p.leftmost() == child) return true;
    uint32_t n = p.count(), b = p.base();
    for (uint32_t i = 0; i < n; ++i)
      if (p.slot_value(circ_index(b, i, cap_)) == child) return true;
    return false;
  }

  // Locks and returns the internal node at parent_level holding child_off.
  CircNode lock_parent_of(uint64_t child_off, uint64_t route_key, uint32_t parent_level) {
    for (;;) {
      uint64_t cur = root_offset();
      if (node(cur).level() < parent_level) continue;  // root swing in flight
      CircNode nd = node(cur);
      nd.lock();
      bool restart = false;
      while (nd.level() > parent_level) {
        if (want_move_right(nd, route_key)) {
          uint64_t next = nd.sibling();
          nd.unlock();
          nd = node(next);
          nd.lock();
          continue;
        }
        uint64_t child = route_child(nd, route_key);
        nd.unlock();
        nd = node(child);
        nd.lock();
      }
      int hops = 0;
      while (!contains_child(nd, child_off)) {
        uint64_t next = nd.sibling();
        nd.unlock();
        if (next == 0 || ++hops > (1 << 20)) {
          restart = true;
          break;
        }
        nd = node(next);
        nd.lock();
      }
      if (!restart) return nd;
    }
  }

  // ---- split protocol ------------------------------------------------------

  // Splits a full leaf around its middle with the pending pair, following
  // the strict order: copy out the greater half, commit the new header and
  // sibling, swing the old sibling, null the copied pairs, shrink the old
  // count, then place a smaller-half pair with a normal insertion. Every
  // step's persists are fenced before the next begins.
  SplitResult split_leaf_core(CircNode& L, uint64_t k, uint64_t v) {
    uint32_t N = cap_, half = N / 2, b = L.base();
    bool to_right = k > L.slot_key(circ_index(b, half - 1, N));
    CircNode R = CircNode::create(*a_, N, 0);
    LineTracker lt(a_);
    uint32_t m = 0;
    bool placed = !to_right;
    for (uint32_t j = half; j < N; ++j) {
      KvPair p = L.slot(circ_index(b, j, N));
      if (!placed && k < p.key) {
        R.write_pair_key_first(m, k, v);
        lt.touch(R.slot_line(m));
        ++m;
        placed = true;
      }
      R.write_pair_key_first(m, p.key, p.value);
      lt.touch(R.slot_line(m));
      ++m;
    }
    if (!placed) {
      R.write_pair_key_first(m, k, v);
      lt.touch(R.slot_line(m));
      ++m;
    }
    lt.finish();
    a_->fence();

    R.set_base_count_atomic(0, m);
    R.set_sibling_atomic(L.sibling());
    R.flush_header();
    a_->fence();

    L.set_sibling_atomic(R.offset());
    L.flush_header();
    a_->fence();
    LineTracker nuller(a_);
    for (uint32_t j = half; j < N; ++j) {
      uint32_t s = circ_index(b, j, N);
      L.clear_slot(s);
      nuller.touch(L.slot_line(s));
    }
    nuller.finish();
    a_->fence();

    L.set_base_count_atomic(b, half);
    L.flush_header();
    a_->fence();

    if (!to_right) L.insert(k, v);
    return {R.offset(), R.min_key()};
  }

  // Internal split: the middle key is promoted, its child becomes the new
  // node's leftmost. Same persistence order as the leaf split.
  SplitResult split_internal_core(CircNode& P, uint64_t sep, uint64_t child) {
    uint32_t K = P.count(), b = P.base(), N = cap_;
    uint32_t mid = K / 2;
    uint64_t promoted = P.slot_key(circ_index(b, mid, N));
    uint64_t promoted_child = P.slot_value(circ_index(b, mid, N));
    CircNode R = CircNode::create(*a_, N, P.level());
    a_->write_u64(R.block(), layout::kWordLeftmost * 8, promoted_child);
    LineTracker lt(a_);
    uint32_t m = 0;
    for (uint32_t j = mid + 1; j < K; ++j) {
      KvPair p = P.slot(circ_index(b, j, N));
      R.write_pair_key_first(m, p.key, p.value);
      lt.touch(R.slot_line(m));
      ++m;
    }
    lt.finish();
    a_->fence();

    R.set_base_count_atomic(0, m);
    R.set_sibling_atomic(P.sibling());
    R.flush_header();
    a_->fence();

    P.set_sibling_atomic(R.offset());
    P.flush_header();
    a_->fence();
    LineTracker nuller(a_);
    for (uint32_t j = mid; j < K; ++j) {
      uint32_t s = circ_index(b, j, N);
      P.clear_slot(s);
      nuller.touch(P.slot_line(s));
    }
    nuller.finish();
    a_->fence();

    P.set_base_count_atomic(b, mid);
    P.flush_header();
    a_->fence();

    if (sep < promoted)
      P.insert(sep, child);
    else
      R.insert(sep, child);
    return {R.offset(), promoted};
  }

  // Builds a one-key root over (left, right) and swings the root pointer.
  void grow_root(uint64_t left, uint64_t sep, uint64_t right, uint32_t level) {
    CircNode nr = CircNode::create(*a_, cap_, level);
    a_->write_u64(nr.block(), layout::kWordLeftmost * 8, left);
    nr.write_pair_key_first(0, sep, right);
    nr.flush_slot_line(0);
    nr.set_base_count_atomic(0, 1);
    nr.flush_header();
    a_->fence();
    a_->write_atomic8(meta_handle(), kMetaRoot, nr.offset());
    a_->flush_range(meta_handle(), 0, 32);
    a_->fence();
  }

  // Inserts (sep -> new_off) into the parent of `child`, growing the root
  // if child was the root. `child` stays locked; parents are locked
  // child-then-parent and released after their own parent work finishes.
  void link_into_parent(CircNode& child, uint64_t sep, uint64_t new_off) {
    if (child.offset() == root_offset()) {
      std::lock_guard<std::mutex> g(root_mu_);
      if (child.offset() == root_offset()) {
        grow_root(child.offset(), sep, new_off, child.level() + 1);
        return;
      }
    }
    CircNode P = lock_parent_of(child.offset(), sep, child.level() + 1);
    if (P.count() < internal_cap()) {
      P.insert(sep, new_off);
      P.unlock();
      return;
    }
    SplitResult sr = split_internal_core(P, sep, new_off);
    splits_.fetch_add(1, std::memory_order_relaxed);
    link_into_parent(P, sr.separator, sr.new_node);
    P.unlock();
  }

  // ---- merge protocol ------------------------------------------------------

  // Moves L's pairs into its right sibling, commits the sibling's header,
  // zeroes L's count, detaches L from the chain, then updates the parent.
  void merge_leaves_core(CircNode& L, CircNode& R) {
    uint32_t ln = L.count(), N = cap_;
    uint32_t rb = R.base();
    LineTracker lt(a_);
    for (uint32_t j = 0; j < ln; ++j) {
      KvPair p = L.slot(circ_index(L.base(), j, N));
      uint32_t dst = static_cast<uint32_t>((uint64_t{rb} + N - ln + j) & (N - 1));
      R.write_pair_key_first(dst, p.key, p.value);
      lt.touch(R.slot_line(dst));
    }
    lt.finish();
    a_->fence();
    R.set_base_count_atomic(static_cast<uint32_t>((uint64_t{rb} + N - ln) & (N - 1)),
                            R.count() + ln);
    R.flush_header();
    a_->fence();
    L.set_base_count_atomic(L.base(), 0);
    L.flush_header();
    a_->fence();
  }

  // L's sibling pointer is left in place while its lock is held; only the
  // predecessor's pointer (or the leaf head) moves.
  void detach_from_chain(uint64_t l_off, uint64_t r_off, CircNode* pred) {
    if (pred) {
      pred->set_sibling_atomic(r_off);
      pred->flush_header();
      a_->fence();
    } else {
      a_->write_atomic8(meta_handle(), kMetaLeafHead, r_off);
      a_->flush_range(meta_handle(), 0, 32);
      a_->fence();
    }
    (void)l_off;
  }

  // Live-path parent fix after a merge removed child x in favor of its
  // right sibling r: drop the pair routing to r first (searches for that
  // range redirect through x's husk), then swing x's own entry to r.
  void remove_child_after_merge(CircNode& P, uint64_t x, uint64_t r) {
    uint32_t n = P.count(), b = P.base();
    if (P.leftmost() == x) {
      P.set_leftmost_atomic(r);
      P.flush_header();
      a_->fence();
      P.erase(P.slot_key(circ_index(b, 0, cap_)));
      return;
    }
    for (uint32_t i = 0; i < n; ++i) {
      if (P.slot_value(circ_index(b, i, cap_)) == x) {
        uint64_t sep_above = P.slot_key(circ_index(b, i + 1, cap_));
        P.erase(sep_above);
        // the erase shifted pairs; re-locate x before swinging it to r
        uint32_t n2 = P.count(), b2 = P.base();
        for (uint32_t j = 0; j < n2; ++j) {
          uint32_t s = circ_index(b2, j, cap_);
          if (P.slot_value(s) == x) {
            a_->write_atomic8(P.array_handle(), uint64_t{s} * layout::kPairBytes + 8, r);
            P.flush_slot_line(s);
            a_->fence();
            return;
          }
        }
        throw corruption_error("merge: child vanished from parent during fix");
      }
    }
    throw corruption_error("merge: child not present in parent");
  }

  // Attempts the right-sibling merge; every lock beyond the held leaf is
  // conditional, so contention just leaves the node underutilized.
  bool try_merge_right(CircNode& L) {
    uint64_t r_off = L.sibling();
    if (r_off == 0) return false;
    CircNode R = node(r_off);
    if (!R.try_lock()) return false;
    if (R.count() == 0 || R.count() + L.count() > cap_) {
      R.unlock();
      return false;
    }
    uint64_t route = L.count() > 0 ? L.min_key() : R.min_key();
    CircNode P = lock_parent_of(L.offset(), route, 1);
    if (!contains_child(P, r_off)) {  // different parents
      P.unlock();
      R.unlock();
      return false;
    }
    // find the left neighbor for the chain detach
    CircNode pred;
    bool have_pred = false;
    if (L.offset() != leaf_head()) {
      uint64_t c = leaf_head();
      int guard = 0;
      while (c != 0 && node(c).sibling() != L.offset() && guard++ < (1 << 22)) c = node(c).sibling();
      if (c == 0) {
        P.unlock();
        R.unlock();
        return false;
      }
      pred = node(c);
      if (!pred.try_lock()) {
        P.unlock();
        R.unlock();
        return false;
      }
      if (pred.sibling() != L.offset()) {
        pred.unlock();
        P.unlock();
        R.unlock();
        return false;
      }
      have_pred = true;
    }
    merge_leaves_core(L, R);
    detach_from_chain(L.offset(), r_off, have_pred ? &pred : nullptr);
    remove_child_after_merge(P, L.offset(), r_off);
    merges_.fetch_add(1, std::memory_order_relaxed);
    if (have_pred) pred.unlock();
    P.unlock();
    R.unlock();
    return true;
  }

  // ---- recovery internals ---------------------------------------------------

  struct RunInfo {
    uint32_t start = 0;
    uint32_t len = 0;
    int64_t dup_pos = -1;  // logical position p where slot p and p+1 hold one value
  };

  static bool slot_valid(const CircNode& nd, uint32_t s) { return nd.slot_value(s) != 0; }

  // Derives the occupied circular run. The valid slots of any reachable
  // image form one contiguous circular range (its complement is one gap).
  RunInfo compute_run(const CircNode& nd) const {
    uint32_t N = cap_;
    std::vector<bool> valid(N);
    uint32_t cnt = 0;
    for (uint32_t s = 0; s < N; ++s) {
      valid[s] = slot_valid(nd, s);
      if (valid[s]) ++cnt;
    }
    RunInfo run;
    run.len = cnt;
    if (cnt == 0) return run;
    if (cnt == N) {
      run.start = nd.base();  // full node: any rotation; trust the header
    } else {
      // start = first valid slot whose predecessor is invalid
      uint32_t start = N;
      uint32_t transitions = 0;
      for (uint32_t s = 0; s < N; ++s) {
        bool prev = valid[(s + N - 1) & (N - 1)];
        if (valid[s] && !prev) {
          ++transitions;
          start = s;
        }
      }
      if (transitions != 1) throw corruption_error("valid slots are not one circular run");
      run.start = start;
    }
    for (uint32_t i = 0; i + 1 < run.len; ++i) {
      uint32_t s0 = circ_index(run.start, i, N), s1 = circ_index(run.start, i + 1, N);
      if (nd.slot_value(s0) == nd.slot_value(s1)) {
        if (run.dup_pos >= 0) throw corruption_error("more than one duplicated value in node");
        run.dup_pos = i;
      }
    }
    return run;
  }

  bool intra_consistent(const CircNode& nd) const {
    RunInfo run = compute_run(nd);
    if (run.dup_pos >= 0) return false;
    if (run.len == 0) return nd.count() == 0;
    return run.start == nd.base() && run.len == nd.count();
  }

  std::vector<KvPair> run_distinct_pairs(const CircNode& nd, const RunInfo& run) const {
    std::vector<KvPair> out;
    for (uint32_t i = 0; i < run.len; ++i) {
      KvPair p = nd.slot(circ_index(run.start, i, cap_));
      if (!out.empty() && out.back().value == p.value) continue;
      out.push_back(p);
    }
    return out;
  }

  // Rewrites a node's pairs to `pairs` starting at target_base and commits
  // the header. Idempotent: re-running after a crash converges.
  void rewrite_node(CircNode& nd, const std::vector<KvPair>& pairs, uint32_t target_base) {
    uint32_t N = cap_;
    LineTracker lt(a_);
    std::vector<bool> keep(N, false);
    for (uint32_t i = 0; i < pairs.size(); ++i) {
      uint32_t s = circ_index(target_base, i, N);
      keep[s] = true;
      if (nd.slot(s) != pairs[i]) {
        nd.write_pair_value_first(s, pairs[i].key, pairs[i].value);
        lt.touch(nd.slot_line(s));
      }
    }
    for (uint32_t s = 0; s < N; ++s) {
      if (!keep[s] && nd.slot_value(s) != 0) {
        nd.clear_slot(s);
        lt.touch(nd.slot_line(s));
      }
    }
    lt.finish();
    a_->fence();
    nd.set_base_count_atomic(target_base, static_cast<uint32_t>(pairs.size()));
    nd.flush_header();
    a_->fence();
  }

  void repair_node_intra(CircNode& nd, RecoveryReport& rep) {
    RunInfo run = compute_run(nd);
    uint32_t b = nd.base(), n = nd.count();
    if (run.dup_pos < 0) {
      if (run.len == 0) {
        if (n != 0) {
          nd.set_base_count_atomic(b, 0);
          nd.flush_header();
          a_->fence();
          rep.fixes.push_back({"2", nd.offset()});
        }
        return;
      }
      if (run.start == b && run.len == n) return;
      std::string tag = run.len == n + 1 ? "1b" : (run.len + 1 == n ? "2" : "3b_split");
      if (run.len > n + 1) throw corruption_error("run exceeds header count by more than one");
      nd.set_base_count_atomic(run.start, run.len);
      nd.flush_header();
      a_->fence();
      rep.fixes.push_back({tag, nd.offset()});
      return;
    }
    std::vector<KvPair> pairs = run_distinct_pairs(nd, run);
    if (run.len == n + 1) {
      // interrupted insertion shift: put every pair back and keep the header
      rewrite_node(nd, pairs, b);
      rep.fixes.push_back({"1a", nd.offset()});
    } else if (run.len == n) {
      // interrupted deletion shift: finish it
      rewrite_node(nd, pairs, b);
      rep.fixes.push_back({"2", nd.offset()});
    } else {
      throw corruption_error("duplicated value with unexpected run length");
    }
  }

  std::set<uint64_t> node_values(const CircNode& nd, bool include_leftmost) const {
    std::set<uint64_t> vals;
    for (uint32_t s = 0; s < cap_; ++s) {
      uint64_t v = nd.slot_value(s);
      if (v != 0) vals.insert(v);
    }
    if (include_leftmost && nd.leftmost() != 0) vals.insert(nd.leftmost());
    return vals;
  }

  // Repairs a torn split or merge between chain neighbors. Returns true if
  // L was detached from the chain.
  bool repair_sibling_pair(CircNode& L, CircNode& R, CircNode* pred, uint32_t level,
                           RecoveryReport& rep) {
    bool internal = level > 0;
    std::set<uint64_t> lvals = node_values(L, false);
    std::set<uint64_t> rvals = node_values(R, internal);
    if (lvals.empty()) return false;
    bool overlap = false;
    for (uint64_t v : lvals)
      if (rvals.count(v)) {
        overlap = true;
        break;
      }
    if (!overlap) return false;

    if (L.count() == 0) {
      // merge finished its count reset but not the detach
      if (internal) throw corruption_error("internal node looks merged; merges are leaf-only");
      clear_values_in(L, lvals);
      detach_from_chain(L.offset(), R.offset(), pred);
      rep.fixes.push_back({"3b_merge", L.offset()});
      return true;
    }

    // Valid slots of R outside its committed window are an uncommitted
    // merge prepend (the header commit would have moved the window over
    // them). Stores persist per line, so the strays need not be
    // contiguous; every one of them duplicates a pair still owned by L.
    std::set<uint64_t> stray;
    for (uint32_t s = 0; s < cap_; ++s) {
      uint64_t v = R.slot_value(s);
      if (v != 0 && !in_header_window(R, s)) stray.insert(v);
    }
    if (!stray.empty()) {
      for (uint64_t v : stray)
        if (!lvals.count(v))
          throw corruption_error("stray slots in sibling do not match a merge source");
      clear_values_in(R, stray);
      rep.fixes.push_back({"merge_rollback", R.offset()});
      return false;
    }

    bool l_consistent = intra_consistent(L);
    bool all_l_in_r = true;
    for (uint64_t v : lvals)
      if (!rvals.count(v)) {
        all_l_in_r = false;
        break;
      }
    if (all_l_in_r && l_consistent) {
      // merge copied everything and committed R; finish the left side
      if (internal) throw corruption_error("internal node looks merged; merges are leaf-only");
      L.set_base_count_atomic(L.base(), 0);
      L.flush_header();
      a_->fence();
      detach_from_chain(L.offset(), R.offset(), pred);
      rep.fixes.push_back({"3a_merge", L.offset()});
      return true;
    }

    // torn split: clear the copied pairs out of L and recommit its header
    std::set<uint64_t> dups;
    for (uint64_t v : lvals)
      if (rvals.count(v)) dups.insert(v);
    std::string tag = l_consistent ? "3a_split" : "3b_split";
    clear_values_in(L, dups);
    RunInfo lrun = compute_run(L);
    std::vector<KvPair> pairs = run_distinct_pairs(L, lrun);
    rewrite_node(L, pairs, lrun.len == 0 ? L.base() : lrun.start);
    rep.fixes.push_back({tag, L.offset()});
    return false;
  }

  bool in_header_window(const CircNode& nd, uint32_t s) const {
    uint32_t b = nd.base(), n = nd.count(), N = cap_;
    if (n == 0) return false;
    uint32_t rel = (s + N - b) & (N - 1);
    return rel < n;
  }

  void clear_values_in(CircNode& nd, const std::set<uint64_t>& vals) {
    LineTracker lt(a_);
    bool any = false;
    for (uint32_t s = 0; s < cap_; ++s) {
      uint64_t v = nd.slot_value(s);
      if (v != 0 && vals.count(v)) {
        nd.clear_slot(s);
        lt.touch(nd.slot_line(s));
        any = true;
      }
    }
    lt.finish();
    if (any) a_->fence();
  }

  uint64_t chain_head(uint32_t level) const {
    if (level == 0) return leaf_head();
    CircNode nd = node(root_offset());
    while (nd.level() > level) nd = node(nd.leftmost());
    if (nd.level() != level) throw corruption_error("level missing below root");
    return nd.offset();
  }

  void repair_level_chain(uint32_t level, RecoveryReport& rep) {
    uint64_t prev = 0;
    uint64_t cur = chain_head(level);
    int guard = 0;
    while (cur != 0 && guard++ < (1 << 22)) {
      CircNode nd = node(cur);
      nd.reset_lock();
      uint64_t sib = nd.sibling();
      if (sib != 0) {
        CircNode right = node(sib);
        right.reset_lock();
        CircNode pred_node = prev ? node(prev) : CircNode();
        if (repair_sibling_pair(nd, right, prev ? &pred_node : nullptr, level, rep)) {
          cur = sib;
          continue;
        }
      }
      repair_node_intra(nd, rep);
      prev = cur;
      cur = nd.sibling();
    }
  }

  uint64_t subtree_min(uint64_t off) const {
    CircNode nd = node(off);
    while (nd.level() > 0) nd = node(nd.leftmost());
    if (nd.count() == 0) throw corruption_error("separator derivation hit an empty subtree");
    return nd.min_key();
  }

  // Rebuilds an internal node's child list from the actual next-level
  // chain segment; splits the node if the segment outgrew it.
  void rebuild_parent(CircNode& P, const std::vector<uint64_t>& seg, RecoveryReport& rep,
                      bool added) {
    if (seg.empty()) throw corruption_error("internal node owns no children");
    uint32_t max_children = internal_cap() + 1;
    std::vector<uint64_t> mine(seg.begin(),
                               seg.begin() + std::min<size_t>(seg.size(), max_children));
    std::vector<uint64_t> rest(seg.begin() + mine.size(), seg.end());
    if (!rest.empty()) {
      // overflow: spill the tail into a fresh right sibling
      CircNode R = CircNode::create(*a_, cap_, P.level());
      a_->write_u64(R.block(), layout::kWordLeftmost * 8, rest.front());
      uint32_t m = 0;
      LineTracker lt(a_);
      for (size_t i = 1; i < rest.size(); ++i) {
        R.write_pair_key_first(m, subtree_min(rest[i]), rest[i]);
        lt.touch(R.slot_line(m));
        ++m;
      }
      lt.finish();
      a_->fence();
      R.set_base_count_atomic(0, m);
      R.set_sibling_atomic(P.sibling());
      R.flush_header();
      a_->fence();
      P.set_sibling_atomic(R.offset());
      P.flush_header();
      a_->fence();
    }
    if (P.leftmost() != mine.front()) {
      P.set_leftmost_atomic(mine.front());
      P.flush_header();
      a_->fence();
    }
    std::vector<KvPair> pairs;
    for (size_t i = 1; i < mine.size(); ++i)
      pairs.push_back({subtree_min(mine[i]), mine[i]});
    rewrite_node(P, pairs, P.base());
    rep.fixes.push_back({added ? "in_child_added" : "in_child_removed", P.offset()});
  }

  void reconcile_children(uint32_t parent_level, RecoveryReport& rep) {
    uint64_t p_off = chain_head(parent_level);
    uint64_t cursor = chain_head(parent_level - 1);
    int guard = 0;
    while (p_off != 0 && guard++ < (1 << 22)) {
      CircNode P = node(p_off);
      uint64_t next_p = P.sibling();
      uint64_t boundary = next_p ? node(next_p).leftmost() : 0;
      std::vector<uint64_t> seg;
      uint64_t c = cursor;
      int inner = 0;
      while (c != 0 && c != boundary && inner++ < (1 << 22)) {
        seg.push_back(c);
        c = node(c).sibling();
      }
      cursor = c;
      std::vector<uint64_t> rec;
      rec.push_back(P.leftmost());
      uint32_t n = P.count(), b = P.base();
      for (uint32_t i = 0; i < n; ++i) rec.push_back(P.slot_value(circ_index(b, i, cap_)));
      if (rec != seg) rebuild_parent(P, seg, rep, seg.size() > rec.size());
      p_off = next_p;
    }
  }

  // A pending root split leaves siblings at the root level; build parents
  // over the chain until a single node tops the tree again.
  void fix_root_chain(RecoveryReport& rep) {
    int guard = 0;
    while (node(root_offset()).sibling() != 0 && guard++ < 64) {
      CircNode r = node(root_offset());
      std::vector<uint64_t> chainv;
      for (uint64_t c = r.offset(); c != 0; c = node(c).sibling()) chainv.push_back(c);
      uint32_t max_children = internal_cap() + 1;
      std::vector<uint64_t> level_heads;
      size_t i = 0;
      while (i < chainv.size()) {
        size_t take = std::min<size_t>(max_children, chainv.size() - i);
        CircNode np = CircNode::create(*a_, cap_, r.level() + 1);
        a_->write_u64(np.block(), layout::kWordLeftmost * 8, chainv[i]);
        uint32_t m = 0;
        LineTracker lt(a_);
        for (size_t j = 1; j < take; ++j) {
          np.write_pair_key_first(m, subtree_min(chainv[i + j]), chainv[i + j]);
          lt.touch(np.slot_line(m));
          ++m;
        }
        lt.finish();
        a_->fence();
        np.set_base_count_atomic(0, m);
        if (!level_heads.empty()) {
          CircNode prev = node(level_heads.back());
          prev.set_sibling_atomic(np.offset());
          prev.flush_header();
        }
        np.flush_header();
        a_->fence();
        level_heads.push_back(np.offset());
        i += take;
      }
      a_->write_atomic8(meta_handle(), kMetaRoot, level_heads.front());
      a_->flush_range(meta_handle(), 0, 32);
      a_->fence();
      rep.fixes.push_back({"root_rebuilt", level_heads.front()});
    }
  }

  // ---- validation helpers ---------------------------------------------------

  void check_node(const CircNode& nd, std::vector<std::string>& problems) const {
    uint32_t n = nd.count(), b = nd.base(), N = cap_;
    if (b >= N || n > N) {
      problems.push_back("header out of range at node " + std::to_string(nd.offset()));
      return;
    }
    std::set<uint64_t> vals;
    uint64_t prev_key = 0;
    for (uint32_t i = 0; i < n; ++i) {
      KvPair p = nd.slot(circ_index(b, i, N));
      if (p.value == 0)
        problems.push_back("null value inside run at node " + std::to_string(nd.offset()));
      if (i > 0 && p.key <= prev_key)
        problems.push_back("keys not increasing at node " + std::to_string(nd.offset()));
      if (!vals.insert(p.value).second)
        problems.push_back("duplicate value in node " + std::to_string(nd.offset()));
      prev_key = p.key;
    }
    for (uint32_t i = n; i < N; ++i) {
      if (nd.slot_value(circ_index(b, i, N)) != 0)
        problems.push_back("non-null slot outside run at node " + std::to_string(nd.offset()));
    }
  }

  void check_subtree(const CircNode& nd, std::optional<uint64_t> lo, std::optional<uint64_t> hi,
                     uint32_t expect_level, std::vector<uint64_t>& leaves,
                     std::vector<std::string>& problems) const {
    if (nd.level() != expect_level) {
      problems.push_back("level mismatch at node " + std::to_string(nd.offset()));
      return;
    }
    uint32_t n = nd.count(), b = nd.base();
    if (nd.level() == 0) {
      for (uint32_t i = 0; i < n; ++i) {
        uint64_t k = nd.slot_key(circ_index(b, i, cap_));
        if (lo && k < *lo)
          problems.push_back("key below fence at leaf " + std::to_string(nd.offset()));
        if (hi && k >= *hi)
          problems.push_back("key above fence at leaf " + std::to_string(nd.offset()));
      }
      leaves.push_back(nd.offset());
      return;
    }
    if (nd.leftmost() == 0) {
      problems.push_back("internal node missing leftmost child " + std::to_string(nd.offset()));
      return;
    }
    uint64_t first_sep = n > 0 ? nd.slot_key(circ_index(b, 0, cap_)) : 0;
    check_subtree(node(nd.leftmost()), lo, n > 0 ? std::optional<uint64_t>(first_sep) : hi,
                  expect_level - 1, leaves, problems);
    for (uint32_t i = 0; i < n; ++i) {
      uint64_t sep = nd.slot_key(circ_index(b, i, cap_));
      std::optional<uint64_t> next =
          i + 1 < n ? std::optional<uint64_t>(nd.slot_key(circ_index(b, i + 1, cap_))) : hi;
      check_subtree(node(nd.slot_value(circ_index(b, i, cap_))), sep, next, expect_level - 1,
                    leaves, problems);
    }
  }

  PmArena* a_;
  uint64_t meta_;
  uint32_t cap_;
  SearchMode mode_;
  std::mutex root_mu_;
  std::atomic<uint64_t> splits_{0};
  std::atomic<uint64_t> merges_{0};
};

}  // namespace circtree
