#pragma once

#include <string>
#include <vector>

#include "mlmem/kb_types.hpp"
#include "mlmem/model.hpp"
#include "mlmem/numerics.hpp"
#include "mlmem/vocab.hpp"

namespace mlmem {

/// Structure of a three-level memory, independent of any weights: which
/// queries are attended, how many results each holds, how many cells each
/// result holds, and which token ids make up every bag.
///
/// Queries that returned no rows are dropped: they have nothing to attend to.
struct MemoryLayout {
  std::vector<KBQuery> queries;
  std::vector<std::size_t> results_per_query;
  std::vector<std::size_t> cells_per_result;
  std::vector<std::string> cell_keys;    // flat, in (query, result, cell) order
  std::vector<std::string> cell_values;  // the copyable token of each cell

  std::vector<std::size_t> query_token_ids;   // concatenated bags, one per query
  std::vector<std::size_t> query_bag_sizes;
  std::vector<std::size_t> result_token_ids;  // concatenated bags, one per result
  std::vector<std::size_t> result_bag_sizes;
  std::vector<std::size_t> cell_key_ids;

  bool empty() const { return queries.empty(); }
  std::size_t n_queries() const { return queries.size(); }
  std::size_t n_results() const { return cells_per_result.size(); }
  std::size_t n_cells() const { return cell_values.size(); }
};

/// Three-level layout over the given queries. Throws "empty result" when a
/// result has no cells.
MemoryLayout layout_memory(const std::vector<KBQuery>& queries, const Vocabulary& vocab);

/// Flat ablation layout: a single implicit query with an empty bag; every
/// subject-relation-object triple becomes a one-cell result keyed by the
/// bag {subject, relation} whose value is the object. Each result also
/// contributes a (subject, subject_key, subject) entry so the subject
/// itself stays copyable.
MemoryLayout layout_flat_memory(const std::vector<KBQuery>& queries, const std::string& subject_key,
                                const Vocabulary& vocab);

/// One triple per non-subject cell of every result. Throws naming the
/// offending result when subject_key is missing.
std::vector<Triple> flatten_to_triples(const std::vector<KBQuery>& queries, const std::string& subject_key);

/// Bag of words over a value's tokens, computed directly from the table.
template <typename Real>
std::vector<Real> bow_embed(const std::string& value, const Vocabulary& vocab, const Tensor<Real>& embedding,
                            BagMode mode = BagMode::Sum);

/// Memory bound to a tape: representation matrices for each level.
template <typename Real>
struct MultiLevelMemory {
  MemoryLayout layout;
  Var query_reprs;      // [n_queries x E]
  Var result_reprs;     // [n_results x E]
  Var cell_key_embeds;  // [n_cells x E]
};

template <typename Real>
MultiLevelMemory<Real> build_memory(Tape<Real>& tape, MemoryLayout layout, Tensor<Real>& embedding,
                                    BagMode mode = BagMode::Sum);

}  // namespace mlmem
