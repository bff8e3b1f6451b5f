#pragma once

#include <string>
#include <utility>
#include <vector>

namespace mlmem {

using Tokens = std::vector<std::string>;
using KeyValue = std::pair<std::string, std::string>;

/// One row returned by the knowledge base: ordered (key, value) cells.
struct KBResult {
  std::vector<KeyValue> cells;

  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : cells)
      if (k == key) return &v;
    return nullptr;
  }
  bool operator==(const KBResult&) const = default;
};

/// A fired query: its slot constraints and the rows it returned.
struct KBQuery {
  std::vector<KeyValue> slots;
  std::vector<KBResult> results;

  bool operator==(const KBQuery&) const = default;
};

struct Triple {
  std::string subject;
  std::string relation;
  std::string object;

  bool operator==(const Triple&) const = default;
};

}  // namespace mlmem
