#include "mlmem/chat.hpp"

#include <algorithm>

#include "mlmem/decoder.hpp"

namespace mlmem {

namespace {

// An agent that keeps issuing calls is cut off after this many in one reply.
constexpr std::size_t kMaxCallsPerReply = 3;

}  // namespace

std::vector<KBResult> filter_kb(const std::vector<KBResult>& rows, const std::map<std::string, std::string>& slots) {
  std::vector<KBResult> out;
  for (const auto& row : rows) {
    bool match = true;
    for (const auto& [key, value] : slots) {
      const std::string* cell = row.find(key);
      if (cell && *cell != value) {
        match = false;
        break;
      }
    }
    if (match) out.push_back(row);
  }
  return out;
}

ChatSession::ChatSession(Model& model, std::vector<KBResult> kb, std::size_t max_len)
    : model_(model), kb_(std::move(kb)), max_len_(max_len) {
  static_kb_ = schema_for_dialog(model_.domain).query_slot_order.empty();
}

void ChatSession::reset() {
  turns_.clear();
  queries_.clear();
}

Tokens ChatSession::decode_agent() {
  std::vector<KBQuery> visible;
  if (static_kb_)
    visible.push_back(KBQuery{{}, kb_});
  else
    visible = queries_;
  DecodeResult r = predict_turn(model_, turns_, turns_.size(), visible, model_.domain, max_len_);
  Turn agent;
  agent.role = Role::Agent;
  agent.text = r.tokens;
  agent.is_api_call = !r.tokens.empty() && r.tokens.front() == kApiCallToken;
  turns_.push_back(agent);
  return r.tokens;
}

ApiCallOutcome ChatSession::execute_api_call(const Tokens& call) {
  ApiCallOutcome out;
  const DomainSchema& schema = schema_for_dialog(model_.domain);
  auto slots = parse_api_call(call, schema);
  if (!slots) {
    out.warning = "could not parse API call: " + join_tokens(call);
    return out;
  }
  out.parsed = true;
  KBQuery q;
  for (const auto& key : schema.query_slot_order) {
    auto it = slots->find(key);
    if (it != slots->end()) q.slots.emplace_back(key, it->second);
  }
  q.results = filter_kb(kb_, *slots);
  out.results = q.results.size();
  if (q.results.empty()) {
    // nothing to attend over; the agent sees the call in context only
    out.warning = "API call returned no results";
    return out;
  }
  const bool seen =
      std::any_of(queries_.begin(), queries_.end(), [&](const KBQuery& prev) { return prev.slots == q.slots; });
  if (!seen) {
    queries_.push_back(std::move(q));
    out.appended = true;
  }
  return out;
}

ChatReply ChatSession::respond(const std::string& user_text) {
  ChatReply reply;
  Turn user;
  user.text = tokenize(user_text);
  if (user.text.empty()) user.text = {std::string(kSilenceToken)};
  turns_.push_back(std::move(user));

  for (std::size_t calls = 0;; ++calls) {
    Tokens said = decode_agent();
    reply.utterances.push_back(said);
    if (!turns_.back().is_api_call || static_kb_) break;
    if (calls + 1 > kMaxCallsPerReply) {
      reply.warnings.push_back("too many API calls in one reply; not executing the last one");
      break;
    }
    auto outcome = execute_api_call(said);
    if (!outcome.warning.empty()) reply.warnings.push_back(outcome.warning);
    if (!outcome.parsed) break;
    Turn silence;
    silence.text = {std::string(kSilenceToken)};
    turns_.push_back(std::move(silence));
  }
  return reply;
}

}  // namespace mlmem
