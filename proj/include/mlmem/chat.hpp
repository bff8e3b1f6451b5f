#pragma once

#include <map>
#include <string>
#include <vector>

#include "mlmem/corpus.hpp"
#include "mlmem/model.hpp"

namespace mlmem {

/// Rows matching every constrained slot exactly. A slot only constrains rows
/// that have a cell with that key; dontcare slots are never passed in.
std::vector<KBResult> filter_kb(const std::vector<KBResult>& rows, const std::map<std::string, std::string>& slots);

struct ChatReply {
  /// Agent utterances produced for this user turn, API calls included.
  std::vector<Tokens> utterances;
  std::vector<std::string> warnings;
};

struct ApiCallOutcome {
  bool parsed = false;
  bool appended = false;  // false for unparseable, empty or repeated queries
  std::size_t results = 0;
  std::string warning;
};

/// Interactive dialog against a fixed table. An emitted API call is executed
/// against the table, its results become visible, a <silence> user turn is
/// appended and the agent speaks again.
class ChatSession {
 public:
  ChatSession(Model& model, std::vector<KBResult> kb, std::size_t max_len = 40);

  ChatReply respond(const std::string& user_text);
  void reset();

  /// Runs a call against the table and makes its results visible, unless
  /// it is unparseable, matches nothing or repeats an earlier query.
  ApiCallOutcome execute_api_call(const Tokens& call);

  const std::vector<Turn>& turns() const { return turns_; }
  const std::vector<KBQuery>& queries() const { return queries_; }

 private:
  Tokens decode_agent();

  Model& model_;
  std::vector<KBResult> kb_;
  std::size_t max_len_;
  bool static_kb_;
  std::vector<Turn> turns_;
  std::vector<KBQuery> queries_;
};

}  // namespace mlmem
