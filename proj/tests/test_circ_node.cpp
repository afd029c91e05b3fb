#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <random>
#include <vector>

#include "circtree/circ_node.hpp"

using namespace circtree;

namespace {

struct Fixture {
  PmArena arena;
  CircNode node;

  explicit Fixture(uint32_t capacity, uint32_t line = 64)
      : arena(ArenaConfig{1 << 20, line, 300, 20}),
        node(CircNode::create(arena, capacity, 0)) {
    node.flush_header();
    arena.fence();
  }
};

uint64_t val_for(uint64_t k) { return k * 1000 + 1; }

std::vector<uint64_t> keys_of(const CircNode& n) {
  std::vector<uint64_t> ks;
  for (auto& p : n.logical_view()) ks.push_back(p.key);
  return ks;
}

// Count flushes whose target line lies inside the node's KV array.
uint64_t data_flushes(const PmArena& a, const CircNode& n,
                      const std::vector<EventRecord>& ev) {
  uint64_t lo = n.array_abs();
  uint64_t hi = lo + uint64_t{n.capacity()} * 16;
  uint64_t c = 0;
  for (auto& e : ev)
    if (e.kind == ArenaEvent::flush && e.line_base >= lo && e.line_base < hi) ++c;
  return c;
}

}  // namespace

TEST_CASE("circ_index matches true modulo, including the worked example") {
  REQUIRE(circ_index(133, 165, 256) == 42);
  for (uint32_t b = 0; b < 256; b += 7) REQUIRE(circ_index(b % 32, 0, 32) == b % 32);
  for (uint32_t N : {32u, 64u, 128u, 256u})
    for (uint32_t b = 0; b < 1024; ++b)
      for (uint32_t i = 0; i < 1024; i += 3)
        REQUIRE(circ_index(b, i, N) == (b + i) % N);
  REQUIRE_THROWS_AS(circ_index(0, 0, 48), contract_error);
}

TEST_CASE("ascending inserts fill from the base without shifts") {
  Fixture f(8);
  uint64_t shifts0 = f.arena.stats().shift_count;
  for (uint64_t k : {8, 23, 57, 64, 89}) f.node.insert(k, val_for(k));
  REQUIRE(f.arena.stats().shift_count == shifts0);
  REQUIRE(f.node.base() == 0);
  REQUIRE(f.node.count() == 5);
  REQUIRE(keys_of(f.node) == std::vector<uint64_t>{8, 23, 57, 64, 89});
}

TEST_CASE("inserting a second-smallest key wraps the smallest to the array end") {
  // two pairs per line; the scenario walks the motivating sequence:
  // insert 15, delete 8, then insert 22 which shifts only the pair <15>
  Fixture f(8, 32);
  for (uint64_t k : {8, 23, 57, 64, 89}) f.node.insert(k, val_for(k));

  f.arena.clear_events();
  uint64_t s0 = f.arena.stats().shift_count;
  f.node.insert(15, val_for(15));
  REQUIRE(f.arena.stats().shift_count == s0 + 1);  // only <8> moved
  REQUIRE(f.node.base() == 7);                     // 8 wrapped to the physical end
  REQUIRE(f.node.slot_key(7) == 8);
  REQUIRE(f.node.slot_key(0) == 15);
  REQUIRE(data_flushes(f.arena, f.node, f.arena.events()) == 2);

  // delete the smallest: clear in place, one data-line flush
  f.arena.clear_events();
  s0 = f.arena.stats().shift_count;
  f.node.erase(8);
  REQUIRE(f.arena.stats().shift_count == s0);
  REQUIRE(f.node.base() == 0);
  REQUIRE(f.node.count() == 5);
  REQUIRE(data_flushes(f.arena, f.node, f.arena.events()) == 1);

  // now the state has the cleared slot at the physical end and base at 15:
  // inserting 22 shifts exactly one pair (15) and moves the base left
  s0 = f.arena.stats().shift_count;
  f.node.insert(22, val_for(22));
  REQUIRE(f.arena.stats().shift_count == s0 + 1);
  REQUIRE(f.node.base() == 7);
  REQUIRE(f.node.slot_key(7) == 15);
  REQUIRE(keys_of(f.node) == std::vector<uint64_t>{15, 22, 23, 57, 64, 89});
}

TEST_CASE("inserting the greatest key never shifts") {
  Fixture f(16);
  for (uint64_t k : {10, 20, 30, 40, 50}) f.node.insert(k, val_for(k));
  uint32_t b = f.node.base();
  uint64_t s0 = f.arena.stats().shift_count;
  f.node.insert(60, val_for(60));
  REQUIRE(f.arena.stats().shift_count == s0);
  REQUIRE(f.node.base() == b);
  REQUIRE(f.node.count() == 6);
}

TEST_CASE("duplicate insert and full-node insert are rejected") {
  Fixture f(4);
  for (uint64_t k : {1, 2, 3}) f.node.insert(k, val_for(k));
  REQUIRE_THROWS_AS(f.node.insert(2, 5), duplicate_key_error);
  f.node.insert(4, val_for(4));
  REQUIRE_THROWS_AS(f.node.insert(9, 5), node_full_error);
  REQUIRE_THROWS_AS(f.node.insert(9, 0), contract_error);
}

TEST_CASE("search picks one contiguous segment in a wrapped node") {
  // logical keys [8,15,23,57,64,89] with the base near the array end
  Fixture f(8);
  for (uint64_t k : {23, 57, 64, 89}) f.node.insert(k, val_for(k));
  f.node.insert(15, val_for(15));
  f.node.insert(8, val_for(8));
  REQUIRE(f.node.base() == 6);
  REQUIRE(keys_of(f.node) == std::vector<uint64_t>{8, 15, 23, 57, 64, 89});

  SearchProbe probe;
  SearchResult r = f.node.search(32, &probe);
  REQUIRE_FALSE(r.found);
  REQUIRE(r.pos == 3);
  REQUIRE(probe.boundary_slot == 0);
  // scanned slots form one contiguous physical range on one side only
  REQUIRE_FALSE(probe.scanned.empty());
  auto [mn, mx] = std::minmax_element(probe.scanned.begin(), probe.scanned.end());
  REQUIRE(*mx - *mn + 1 == probe.scanned.size());
  bool all_first = *mn >= f.node.base();
  bool all_second = *mx < f.node.base();
  REQUIRE((all_first || all_second));

  SearchResult smallest = f.node.search(8);
  REQUIRE(smallest.found);
  REQUIRE(smallest.pos == 0);
}

TEST_CASE("search agrees with a binary-search oracle over random wrapped nodes") {
  std::mt19937_64 rng(42);
  for (int iter = 0; iter < 10000; ++iter) {
    uint32_t N = 1u << (3 + rng() % 3);
    PmArena a(ArenaConfig{1 << 16, 64, 300, 20});
    CircNode node = CircNode::create(a, N, 0);
    uint32_t n = rng() % N;
    uint32_t b = rng() % N;
    std::vector<uint64_t> keys;
    std::set<uint64_t> kset;
    while (kset.size() < n) kset.insert(rng() % 1000);
    keys.assign(kset.begin(), kset.end());
    for (uint32_t i = 0; i < n; ++i) {
      uint32_t s = circ_index(b, i, N);
      a.write_u64(node.array_handle(), s * 16, keys[i]);
      a.write_u64(node.array_handle(), s * 16 + 8, val_for(keys[i]));
    }
    node.set_base_count_atomic(b, n);

    uint64_t probe = rng() % 1100;
    SearchProbe sp;
    SearchResult r = node.search(probe, &sp);
    auto it = std::lower_bound(keys.begin(), keys.end(), probe);
    if (it != keys.end() && *it == probe) {
      REQUIRE(r.found);
      REQUIRE(r.pos == static_cast<uint32_t>(it - keys.begin()));
      REQUIRE(r.value == val_for(probe));
    } else {
      REQUIRE_FALSE(r.found);
      REQUIRE(r.pos == static_cast<uint32_t>(it - keys.begin()));
    }
    if (!sp.scanned.empty()) {
      auto [mn, mx] = std::minmax_element(sp.scanned.begin(), sp.scanned.end());
      REQUIRE(*mx - *mn + 1 == sp.scanned.size());
    }
  }
}

TEST_CASE("random inserts match a sorted-map oracle and the shift rule") {
  std::mt19937_64 rng(7);
  for (uint32_t N : {8u, 32u, 128u}) {
    PmArena a(ArenaConfig{1 << 20, 64, 300, 20});
    CircNode node = CircNode::create(a, N, 0);
    std::map<uint64_t, uint64_t> oracle;
    int inserts = 0;
    while (inserts < 2000) {
      uint64_t k = rng() % 100000;
      if (oracle.count(k)) continue;
      if (oracle.size() == N) {
        // drain and refill to keep exercising wrap positions
        for (int d = 0; d < 3; ++d) {
          auto it = oracle.begin();
          std::advance(it, rng() % oracle.size());
          node.erase(it->first);
          oracle.erase(it);
        }
        continue;
      }
      uint64_t smaller = 0, greater = 0;
      for (auto& [ok, ov] : oracle) {
        (void)ov;
        if (ok < k) ++smaller;
        if (ok > k) ++greater;
      }
      uint64_t s0 = a.stats().shift_count;
      node.insert(k, val_for(k));
      uint64_t moved = a.stats().shift_count - s0;
      REQUIRE(moved == std::min(smaller, greater));
      REQUIRE(moved <= (oracle.size() + 1) / 2);
      oracle[k] = val_for(k);
      ++inserts;

      if (inserts % 97 == 0) {
        auto view = node.logical_view();
        REQUIRE(view.size() == oracle.size());
        auto it = oracle.begin();
        for (auto& p : view) {
          REQUIRE(p.key == it->first);
          REQUIRE(p.value == it->second);
          ++it;
        }
      }
    }
  }
}

TEST_CASE("deletes keep sorted order and clear the vacated slot") {
  Fixture f(8);
  for (uint64_t k : {10, 20, 30}) f.node.insert(k, val_for(k));
  uint64_t s0 = f.arena.stats().shift_count;
  f.node.erase(20);  // middle key of three: exactly one pair moves
  REQUIRE(f.arena.stats().shift_count == s0 + 1);
  REQUIRE(keys_of(f.node) == std::vector<uint64_t>{10, 30});
  REQUIRE_FALSE(f.node.search(20).found);
  REQUIRE_THROWS_AS(f.node.erase(20), contract_error);

  // all slots outside the run hold null values
  uint32_t live = 0;
  for (uint32_t s = 0; s < 8; ++s)
    if (f.node.slot_value(s) != 0) ++live;
  REQUIRE(live == f.node.count());
}

TEST_CASE("delete mixes agree with the oracle across sizes") {
  std::mt19937_64 rng(13);
  PmArena a(ArenaConfig{1 << 20, 64, 300, 20});
  CircNode node = CircNode::create(a, 64, 0);
  std::map<uint64_t, uint64_t> oracle;
  for (int i = 0; i < 4000; ++i) {
    bool do_insert = oracle.empty() || (oracle.size() < 64 && rng() % 2 == 0);
    if (do_insert) {
      uint64_t k = rng() % 5000;
      if (oracle.count(k)) continue;
      node.insert(k, val_for(k));
      oracle[k] = val_for(k);
    } else {
      auto it = oracle.begin();
      std::advance(it, rng() % oracle.size());
      node.erase(it->first);
      oracle.erase(it);
    }
    if (i % 51 == 0) {
      auto view = node.logical_view();
      REQUIRE(view.size() == oracle.size());
      auto it = oracle.begin();
      for (auto& p : view) {
        REQUIRE(p.key == it->first);
        ++it;
      }
      for (uint32_t i2 = 1; i2 < view.size(); ++i2) REQUIRE(view[i2 - 1].key < view[i2].key);
    }
  }
}

TEST_CASE("flush order within an insert: shifted lines, new pair, then header") {
  Fixture f(32, 64);
  for (uint64_t k = 10; k <= 200; k += 10) f.node.insert(k, val_for(k));
  f.arena.clear_events();
  f.node.insert(15, val_for(15));  // second smallest: left path with shifts
  auto ev = f.arena.events();
  uint64_t hdr_lo = f.node.offset(), hdr_hi = f.node.offset() + 48;
  uint64_t arr_lo = f.node.array_abs();
  int last_data = -1, header_at = -1;
  for (int i = 0; i < static_cast<int>(ev.size()); ++i) {
    if (ev[i].kind != ArenaEvent::flush) continue;
    if (ev[i].line_base >= arr_lo)
      last_data = i;
    else if (ev[i].line_base >= hdr_lo && ev[i].line_base < hdr_hi)
      header_at = i;
  }
  REQUIRE(header_at > last_data);  // header commit strictly after all data flushes
  // the final data flush covers the new pair's line
  uint64_t place_line = f.node.slot_abs(f.node.pos_slot(1)) / 64 * 64;
  uint64_t last_data_line = 0;
  for (auto& e : ev)
    if (e.kind == ArenaEvent::flush && e.line_base >= arr_lo) last_data_line = e.line_base;
  REQUIRE(last_data_line == place_line);
}

TEST_CASE("header base and count move together in one atomic word") {
  Fixture f(8);
  f.node.insert(50, val_for(50));
  Handle block = f.node.block();
  uint64_t packed = f.arena.read_u64(block, 8);
  REQUIRE((packed >> 32) == f.node.base());
  REQUIRE((packed & 0xffffffffu) == f.node.count());

  // durable layout contract: word 0 array, word 1 base/count, word 3 sibling;
  // slots are key then value
  REQUIRE(f.arena.read_u64(block, 0) == f.node.array_abs());
  REQUIRE(f.arena.read_u64(block, 24) == f.node.sibling());
  uint32_t s = f.node.pos_slot(0);
  REQUIRE(f.arena.read_u64_abs(f.node.array_abs() + s * 16) == 50);
  REQUIRE(f.arena.read_u64_abs(f.node.array_abs() + s * 16 + 8) == val_for(50));
}

TEST_CASE("update_value swaps the payload in place") {
  Fixture f(8);
  f.node.insert(5, 111);
  uint32_t b = f.node.base(), n = f.node.count();
  f.node.update_value(5, 222);
  REQUIRE(f.node.search(5).value == 222);
  REQUIRE(f.node.base() == b);
  REQUIRE(f.node.count() == n);
  REQUIRE_THROWS_AS(f.node.update_value(6, 1), contract_error);
}

TEST_CASE("logical view of an empty node is empty") {
  Fixture f(8);
  REQUIRE(f.node.logical_view().empty());
  REQUIRE_FALSE(f.node.search(1).found);
  REQUIRE(f.node.search(1).pos == 0);
}
