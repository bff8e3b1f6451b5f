#include "mlmem/kb_memory.hpp"

#include <stdexcept>

namespace mlmem {

namespace {

void append_bag(const std::string& value, const Vocabulary& vocab, std::vector<std::size_t>& ids, std::size_t& size) {
  for (const auto& tok : tokenize(value)) {
    ids.push_back(vocab.id(tok));
    ++size;
  }
}

void add_result(MemoryLayout& m, const KBResult& r, const Vocabulary& vocab) {
  if (r.cells.empty()) throw std::invalid_argument("empty result");
  std::size_t bag = 0;
  for (const auto& [k, v] : r.cells) {
    append_bag(v, vocab, m.result_token_ids, bag);
    m.cell_keys.push_back(k);
    m.cell_values.push_back(v);
    m.cell_key_ids.push_back(vocab.id(k));
  }
  m.result_bag_sizes.push_back(bag);
  m.cells_per_result.push_back(r.cells.size());
}

}  // namespace

MemoryLayout layout_memory(const std::vector<KBQuery>& queries, const Vocabulary& vocab) {
  MemoryLayout m;
  for (const auto& q : queries) {
    if (q.results.empty()) continue;
    m.queries.push_back(q);
    std::size_t bag = 0;
    for (const auto& [k, v] : q.slots) append_bag(v, vocab, m.query_token_ids, bag);
    m.query_bag_sizes.push_back(bag);
    m.results_per_query.push_back(q.results.size());
    for (const auto& r : q.results) add_result(m, r, vocab);
  }
  return m;
}

std::vector<Triple> flatten_to_triples(const std::vector<KBQuery>& queries, const std::string& subject_key) {
  std::vector<Triple> out;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    for (std::size_t ri = 0; ri < queries[qi].results.size(); ++ri) {
      const KBResult& r = queries[qi].results[ri];
      const std::string* subject = r.find(subject_key);
      if (!subject)
        throw std::invalid_argument("query " + std::to_string(qi) + " result " + std::to_string(ri) + " has no '" +
                                    subject_key + "' cell");
      for (const auto& [k, v] : r.cells)
        if (k != subject_key) out.push_back({*subject, k, v});
    }
  }
  return out;
}

MemoryLayout layout_flat_memory(const std::vector<KBQuery>& queries, const std::string& subject_key,
                                const Vocabulary& vocab) {
  MemoryLayout m;
  KBQuery flat;
  std::vector<std::size_t> bags;
  auto add_entry = [&](const std::string& subject, const std::string& relation, const std::string& object) {
    flat.results.push_back(KBResult{{{relation, object}}});
    std::size_t bag = 0;
    append_bag(subject, vocab, m.result_token_ids, bag);
    append_bag(relation, vocab, m.result_token_ids, bag);
    bags.push_back(bag);
  };
  for (const auto& q : queries) {
    auto triples = flatten_to_triples({KBQuery{{}, q.results}}, subject_key);
    for (const auto& r : q.results) add_entry(*r.find(subject_key), subject_key, *r.find(subject_key));
    for (const auto& t : triples) add_entry(t.subject, t.relation, t.object);
  }
  if (flat.results.empty()) return m;
  m.queries.push_back(flat);
  m.query_bag_sizes.push_back(0);
  m.results_per_query.push_back(flat.results.size());
  m.result_bag_sizes = bags;
  for (const auto& r : flat.results) {
    m.cell_keys.push_back(r.cells[0].first);
    m.cell_values.push_back(r.cells[0].second);
    m.cell_key_ids.push_back(vocab.id(r.cells[0].first));
    m.cells_per_result.push_back(1);
  }
  return m;
}

template <typename Real>
std::vector<Real> bow_embed(const std::string& value, const Vocabulary& vocab, const Tensor<Real>& embedding,
                            BagMode mode) {
  auto tokens = tokenize(value);
  if (tokens.empty()) throw std::invalid_argument("bag of words over an empty value");
  const std::size_t dim = embedding.cols();
  std::vector<Real> out(dim, Real(0));
  for (const auto& tok : tokens) {
    const Real* row = embedding.data.data() + vocab.id(tok) * dim;
    for (std::size_t c = 0; c < dim; ++c) out[c] += row[c];
  }
  if (mode == BagMode::Mean)
    for (auto& x : out) x /= static_cast<Real>(tokens.size());
  return out;
}

namespace {

template <typename Real>
Var bags(Tape<Real>& tape, Tensor<Real>& embedding, const std::vector<std::size_t>& ids,
         const std::vector<std::size_t>& sizes, BagMode mode) {
  if (ids.empty()) return tape.zeros({sizes.size(), embedding.cols()});
  Var rows = tape.lookup(embedding, ids);
  return tape.segment_sum(rows, sizes, mode == BagMode::Mean);
}

}  // namespace

template <typename Real>
MultiLevelMemory<Real> build_memory(Tape<Real>& tape, MemoryLayout layout, Tensor<Real>& embedding, BagMode mode) {
  MultiLevelMemory<Real> m;
  m.layout = std::move(layout);
  if (m.layout.empty()) return m;
  m.query_reprs = bags(tape, embedding, m.layout.query_token_ids, m.layout.query_bag_sizes, mode);
  m.result_reprs = bags(tape, embedding, m.layout.result_token_ids, m.layout.result_bag_sizes, mode);
  m.cell_key_embeds = tape.lookup(embedding, m.layout.cell_key_ids);
  return m;
}

template std::vector<float> bow_embed<float>(const std::string&, const Vocabulary&, const Tensor<float>&, BagMode);
template std::vector<double> bow_embed<double>(const std::string&, const Vocabulary&, const Tensor<double>&, BagMode);
template MultiLevelMemory<float> build_memory<float>(Tape<float>&, MemoryLayout, Tensor<float>&, BagMode);
template MultiLevelMemory<double> build_memory<double>(Tape<double>&, MemoryLayout, Tensor<double>&, BagMode);

}  // namespace mlmem
