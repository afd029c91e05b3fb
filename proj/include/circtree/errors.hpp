#pragma once

#include <stdexcept>
#include <string>

namespace circtree {

// Arena-level failures: out of space, out of bounds, misalignment.
class arena_error : public std::runtime_error {
 public:
  explicit arena_error(const std::string& what) : std::runtime_error(what) {}
};

// Violated precondition of a node/tree operation (caller bug).
class contract_error : public std::logic_error {
 public:
  explicit contract_error(const std::string& what) : std::logic_error(what) {}
};

// Insertion of a key that is already present.
class duplicate_key_error : public std::runtime_error {
 public:
  explicit duplicate_key_error(const std::string& what) : std::runtime_error(what) {}
};

// Node-level insert into a full node; the caller must split first.
class node_full_error : public std::logic_error {
 public:
  explicit node_full_error(const std::string& what) : std::logic_error(what) {}
};

// A durable image is outside the reachable crash-state set.
class corruption_error : public std::runtime_error {
 public:
  explicit corruption_error(const std::string& what) : std::runtime_error(what) {}
};

// Crash enumeration would exceed the configured bound.
class enumeration_limit_error : public std::runtime_error {
 public:
  explicit enumeration_limit_error(const std::string& what) : std::runtime_error(what) {}
};

// Thrown by the crash-injection hook to abort an operation mid-flight.
// Not an error: the harness catches it and takes a crash image.
struct crash_injected {
  uint64_t event_index = 0;
};

}  // namespace circtree
