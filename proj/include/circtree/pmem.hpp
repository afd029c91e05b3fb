#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "circtree/errors.hpp"

namespace circtree {

// A region handed out by PmArena::alloc. offset/size are in bytes.
struct Handle {
  uint64_t offset = 0;
  uint64_t size = 0;

  explicit operator bool() const { return size != 0; }
  bool contains(uint64_t off, uint64_t len) const {
    return off <= size && len <= size - off;
  }
};

struct ArenaConfig {
  uint64_t capacity = 1 << 20;
  uint32_t line_size = 64;          // cache line, power of two, >= 16
  uint64_t flush_latency_ns = 300;  // virtual-clock cost per flush
  uint32_t max_enum_dirty = 20;     // crash-enumeration bound (dirty words)
};

struct ArenaStats {
  uint64_t flush_count = 0;
  uint64_t fence_count = 0;
  uint64_t bytes_flushed = 0;
  uint64_t virtual_clock_ns = 0;
  uint64_t shift_count = 0;
};

enum class ArenaEvent : uint8_t { flush, fence };

struct EventRecord {
  ArenaEvent kind;
  uint64_t line_base;  // absolute byte offset of the flushed line; 0 for fence
};

// One durable state reachable at a crash. For every cache line the image
// persists a prefix of the stores performed on that line since its last
// flush; prefixes are chosen independently per line. This mirrors how a
// line leaves the cache as a unit in store order while distinct lines may
// be written back in any order.
struct CrashImage {
  std::vector<uint64_t> words;                          // full arena image
  std::vector<std::pair<uint64_t, uint32_t>> persisted; // (line index, #stores kept)

  const uint8_t* bytes() const { return reinterpret_cast<const uint8_t*>(words.data()); }
  uint64_t read_u64(uint64_t abs) const {
    uint64_t v;
    std::memcpy(&v, bytes() + abs, 8);
    return v;
  }
};

// Simulated byte-addressable persistent memory. A volatile shadow image
// receives all stores; flush_line copies a line's pending stores into the
// durable image. Word 0 of the arena holds the allocation cursor so that
// allocations stay disjoint across crashes.
class PmArena {
 public:
  explicit PmArena(ArenaConfig cfg) : cfg_(cfg) {
    validate_config();
    shadow_.assign(cfg_.capacity / 8, 0);
    persistent_.assign(cfg_.capacity / 8, 0);
    // Bootstrap cursor: line 0 is reserved for arena metadata.
    shadow_[0] = cfg_.line_size;
    persistent_[0] = cfg_.line_size;
  }

  // Reconstructs an arena from a durable image (e.g. after a crash).
  PmArena(ArenaConfig cfg, const CrashImage& img) : cfg_(cfg) {
    validate_config();
    if (img.words.size() * 8 != cfg_.capacity)
      throw arena_error("image size does not match arena capacity");
    shadow_ = img.words;
    persistent_ = img.words;
    uint64_t cursor = shadow_[0];
    if (cursor < cfg_.line_size || cursor > cfg_.capacity)
      throw corruption_error("bad allocation cursor in image");
  }

  const ArenaConfig& config() const { return cfg_; }
  uint64_t capacity() const { return cfg_.capacity; }
  uint32_t line_size() const { return cfg_.line_size; }

  // ---- allocation ------------------------------------------------------

  Handle alloc(uint64_t size, uint64_t align) {
    if (size == 0) throw contract_error("alloc: size must be positive");
    if (!std::has_single_bit(align)) throw contract_error("alloc: align must be a power of two");
    std::lock_guard<std::mutex> g(mu_);
    uint64_t cur = shadow_[0];
    uint64_t start = (cur + align - 1) & ~(align - 1);
    if (start > cfg_.capacity || size > cfg_.capacity - start)
      throw arena_error("alloc: out of space");
    uint64_t next = start + size;
    store_locked(0, next);
    flush_line_locked(0);
    fence_locked();
    return Handle{start, size};
  }

  // ---- stores ----------------------------------------------------------

  void write(Handle h, uint64_t off, const void* data, uint64_t len) {
    check_range(h, off, len);
    if (len == 0) return;
    std::lock_guard<std::mutex> g(mu_);
    uint64_t abs = h.offset + off;
    std::memcpy(byte_ptr(abs), data, len);
    uint64_t w0 = abs / 8, w1 = (abs + len - 1) / 8;
    for (uint64_t w = w0; w <= w1; ++w) log_store_locked(w);
  }

  void write(Handle h, uint64_t off, std::span<const uint8_t> data) {
    write(h, off, data.data(), data.size());
  }

  void write_u64(Handle h, uint64_t off, uint64_t v) { write(h, off, &v, 8); }

  // 8-byte store that is atomic with respect to crashes: it occupies
  // exactly one store-log entry, so an image holds the old or the new word.
  void write_atomic8(Handle h, uint64_t off, uint64_t v) {
    check_range(h, off, 8);
    if ((h.offset + off) % 8 != 0) throw arena_error("write_atomic8: misaligned offset");
    std::lock_guard<std::mutex> g(mu_);
    store_locked(h.offset + off, v);
  }

  // ---- loads (shadow image) --------------------------------------------

  void read(Handle h, uint64_t off, void* out, uint64_t len) const {
    check_range(h, off, len);
    std::lock_guard<std::mutex> g(mu_);
    std::memcpy(out, byte_ptr(h.offset + off), len);
  }

  uint64_t read_u64(Handle h, uint64_t off) const {
    uint64_t v;
    read(h, off, &v, 8);
    return v;
  }

  uint64_t read_u64_abs(uint64_t abs) const {
    if (abs % 8 != 0 || abs + 8 > cfg_.capacity) throw arena_error("read_u64_abs: out of bounds");
    std::lock_guard<std::mutex> g(mu_);
    return shadow_[abs / 8];
  }

  // ---- persistence -----------------------------------------------------

  void flush_line(Handle h, uint64_t off) {
    check_range(h, off, 1);
    std::lock_guard<std::mutex> g(mu_);
    flush_line_locked(h.offset + off);
  }

  // Flush every line the byte range touches, ascending, one flush each.
  void flush_range(Handle h, uint64_t off, uint64_t len) {
    check_range(h, off, len);
    if (len == 0) return;
    std::lock_guard<std::mutex> g(mu_);
    uint64_t first = (h.offset + off) / cfg_.line_size;
    uint64_t last = (h.offset + off + len - 1) / cfg_.line_size;
    for (uint64_t l = first; l <= last; ++l) flush_line_locked(l * cfg_.line_size);
  }

  void fence() {
    std::lock_guard<std::mutex> g(mu_);
    fence_locked();
  }

  // ---- volatile words (locks): never dirty, never durable ---------------

  uint64_t volatile_load_u64(uint64_t abs) const {
    return std::atomic_ref<uint64_t>(word_ref(abs)).load(std::memory_order_acquire);
  }

  void volatile_store_u64(uint64_t abs, uint64_t v) {
    std::atomic_ref<uint64_t>(word_ref(abs)).store(v, std::memory_order_release);
  }

  bool volatile_cas_u64(uint64_t abs, uint64_t expected, uint64_t desired) {
    return std::atomic_ref<uint64_t>(word_ref(abs))
        .compare_exchange_strong(expected, desired, std::memory_order_acq_rel);
  }

  // ---- instrumentation ---------------------------------------------------

  void count_shift(uint64_t n = 1) { shift_count_.fetch_add(n, std::memory_order_relaxed); }

  ArenaStats stats() const {
    ArenaStats s;
    s.flush_count = flush_count_.load(std::memory_order_relaxed);
    s.fence_count = fence_count_.load(std::memory_order_relaxed);
    s.bytes_flushed = bytes_flushed_.load(std::memory_order_relaxed);
    s.virtual_clock_ns = vclock_.load(std::memory_order_relaxed);
    s.shift_count = shift_count_.load(std::memory_order_relaxed);
    return s;
  }

  uint64_t virtual_clock_ns() const { return vclock_.load(std::memory_order_relaxed); }

  void add_virtual_ns(uint64_t ns) { vclock_.fetch_add(ns, std::memory_order_relaxed); }

  uint64_t dirty_word_count() const {
    std::lock_guard<std::mutex> g(mu_);
    return dirty_words_locked();
  }

  std::vector<EventRecord> events() const {
    std::lock_guard<std::mutex> g(mu_);
    return events_;
  }

  void clear_events() {
    std::lock_guard<std::mutex> g(mu_);
    events_.clear();
  }

  // Hook fired before each flush/fence executes; the crash harness counts
  // persistence events here and throws crash_injected at the chosen one.
  void set_persist_hook(std::function<void(ArenaEvent)> h) {
    std::lock_guard<std::mutex> g(mu_);
    hook_ = std::move(h);
  }

  // ---- crash -------------------------------------------------------------

  CrashImage crash_all_dropped() const {
    std::lock_guard<std::mutex> g(mu_);
    CrashImage img;
    img.words = persistent_;
    return img;
  }

  CrashImage crash_all_persisted() const {
    std::lock_guard<std::mutex> g(mu_);
    CrashImage img;
    img.words = persistent_;
    for (auto& [line, log] : line_stores_) {
      for (auto& st : log) img.words[st.first] = st.second;
      img.persisted.emplace_back(line, static_cast<uint32_t>(log.size()));
    }
    return img;
  }

  CrashImage crash_random(uint64_t seed) const {
    std::lock_guard<std::mutex> g(mu_);
    std::mt19937_64 rng(seed);
    CrashImage img;
    img.words = persistent_;
    for (auto& [line, log] : line_stores_) {
      uint32_t keep = static_cast<uint32_t>(rng() % (log.size() + 1));
      for (uint32_t i = 0; i < keep; ++i) img.words[log[i].first] = log[i].second;
      img.persisted.emplace_back(line, keep);
    }
    return img;
  }

  // Enumerate every reachable crash image (per-line store prefixes) and
  // invoke f on each. Returns the number of images produced.
  uint64_t crash_enumerate(const std::function<void(const CrashImage&)>& f) const {
    std::lock_guard<std::mutex> g(mu_);
    if (dirty_words_locked() > cfg_.max_enum_dirty)
      throw enumeration_limit_error("crash_enumerate: too many dirty words");
    std::vector<uint64_t> lines;
    std::vector<uint32_t> lens;
    uint64_t combos = 1;
    for (auto& [line, log] : line_stores_) {
      lines.push_back(line);
      lens.push_back(static_cast<uint32_t>(log.size()));
      combos *= log.size() + 1;
      if (combos > (uint64_t{1} << 22))
        throw enumeration_limit_error("crash_enumerate: too many store combinations");
    }
    std::vector<uint32_t> keep(lines.size(), 0);
    CrashImage img;
    uint64_t count = 0;
    for (;;) {
      img.words = persistent_;
      img.persisted.clear();
      for (size_t i = 0; i < lines.size(); ++i) {
        const auto& log = line_stores_.at(lines[i]);
        for (uint32_t s = 0; s < keep[i]; ++s) img.words[log[s].first] = log[s].second;
        img.persisted.emplace_back(lines[i], keep[i]);
      }
      f(img);
      ++count;
      size_t i = 0;
      while (i < keep.size() && keep[i] == lens[i]) keep[i++] = 0;
      if (i == keep.size()) break;
      ++keep[i];
    }
    return count;
  }

 private:
  void validate_config() const {
    if (!std::has_single_bit(static_cast<uint64_t>(cfg_.line_size)) || cfg_.line_size < 16)
      throw contract_error("line_size must be a power of two >= 16");
    if (cfg_.capacity == 0 || cfg_.capacity % cfg_.line_size != 0)
      throw contract_error("capacity must be a positive multiple of line_size");
  }

  void check_range(Handle h, uint64_t off, uint64_t len) const {
    if (!h.contains(off, len) || h.offset + h.size > cfg_.capacity)
      throw arena_error("access outside handle");
  }

  uint8_t* byte_ptr(uint64_t abs) { return reinterpret_cast<uint8_t*>(shadow_.data()) + abs; }
  const uint8_t* byte_ptr(uint64_t abs) const {
    return reinterpret_cast<const uint8_t*>(shadow_.data()) + abs;
  }

  uint64_t& word_ref(uint64_t abs) const {
    if (abs % 8 != 0 || abs + 8 > cfg_.capacity) throw arena_error("volatile access out of bounds");
    return const_cast<uint64_t&>(shadow_[abs / 8]);
  }

  // Store an aligned word: update shadow, append to the line's store log.
  void store_locked(uint64_t abs, uint64_t v) {
    shadow_[abs / 8] = v;
    log_store_locked(abs / 8);
  }

  void log_store_locked(uint64_t word_idx) {
    uint64_t line = word_idx * 8 / cfg_.line_size;
    line_stores_[line].emplace_back(word_idx, shadow_[word_idx]);
  }

  void flush_line_locked(uint64_t abs) {
    if (hook_) hook_(ArenaEvent::flush);
    uint64_t line = abs / cfg_.line_size;
    auto it = line_stores_.find(line);
    if (it != line_stores_.end()) {
      for (auto& st : it->second) persistent_[st.first] = st.second;
      line_stores_.erase(it);
    }
    flush_count_.fetch_add(1, std::memory_order_relaxed);
    bytes_flushed_.fetch_add(cfg_.line_size, std::memory_order_relaxed);
    vclock_.fetch_add(cfg_.flush_latency_ns, std::memory_order_relaxed);
    events_.push_back({ArenaEvent::flush, line * cfg_.line_size});
  }

  void fence_locked() {
    if (hook_) hook_(ArenaEvent::fence);
    fence_count_.fetch_add(1, std::memory_order_relaxed);
    events_.push_back({ArenaEvent::fence, 0});
  }

  uint64_t dirty_words_locked() const {
    uint64_t n = 0;
    for (auto& [line, log] : line_stores_) {
      (void)line;
      std::vector<uint64_t> words;
      for (auto& st : log) words.push_back(st.first);
      std::sort(words.begin(), words.end());
      n += std::unique(words.begin(), words.end()) - words.begin();
    }
    return n;
  }

  ArenaConfig cfg_;
  mutable std::mutex mu_;
  std::vector<uint64_t> shadow_;
  std::vector<uint64_t> persistent_;
  std::map<uint64_t, std::vector<std::pair<uint64_t, uint64_t>>> line_stores_;
  std::vector<EventRecord> events_;
  std::function<void(ArenaEvent)> hook_;
  std::atomic<uint64_t> flush_count_{0};
  std::atomic<uint64_t> fence_count_{0};
  std::atomic<uint64_t> bytes_flushed_{0};
  std::atomic<uint64_t> vclock_{0};
  std::atomic<uint64_t> shift_count_{0};
};

}  // namespace circtree
