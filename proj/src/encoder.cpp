#include "mlmem/encoder.hpp"

#include <stdexcept>

namespace mlmem {

template <typename Real>
Var embed_tokens(Tape<Real>& tape, Tensor<Real>& embedding, const Tokens& tokens, const Vocabulary& vocab) {
  if (tokens.empty()) throw std::invalid_argument("empty utterance");
  std::vector<std::size_t> ids;
  ids.reserve(tokens.size());
  for (const auto& tok : tokens) ids.push_back(vocab.id(tok));
  return tape.lookup(embedding, ids);
}

template <typename Real>
UtteranceEncoding encode_utterance(Tape<Real>& tape, const GruVars& forward, const GruVars& backward, Var embeds) {
  const Shape& s = tape.shape(embeds);
  if (s.size() != 2 || s[0] == 0) throw ShapeError("encode_utterance: expects a non-empty [len x E] matrix");
  const std::size_t len = s[0];
  const std::size_t H = forward.hidden_size;

  auto fproj = gru_project_inputs(tape, forward, embeds);
  auto bproj = gru_project_inputs(tape, backward, embeds);
  Var zero = tape.zeros({H});
  std::vector<Var> fwd(len), bwd(len);
  Var h = zero;
  for (std::size_t j = 0; j < len; ++j) fwd[j] = h = gru_step_projected(tape, forward, fproj, j, h);
  h = zero;
  for (std::size_t j = len; j-- > 0;) bwd[j] = h = gru_step_projected(tape, backward, bproj, j, h);

  std::vector<Var> rows(len);
  for (std::size_t j = 0; j < len; ++j) rows[j] = tape.concat({fwd[j], bwd[j]});
  UtteranceEncoding out;
  out.word_states = tape.stack_rows(rows);
  out.repr = tape.concat({fwd[len - 1], bwd[0]});
  return out;
}

template <typename Real>
Var encode_context(Tape<Real>& tape, const GruVars& gru, const std::vector<Var>& utterance_reprs) {
  if (utterance_reprs.empty()) throw std::invalid_argument("encode_context: no utterances");
  Var h = tape.zeros({gru.hidden_size});
  for (Var u : utterance_reprs) h = gru_cell(tape, gru, u, h);
  return h;
}

template <typename Real>
DialogEncoder<Real>::DialogEncoder(Tape<Real>& tape, Tensor<Real>& embedding, const GruVars& forward,
                                   const GruVars& backward, const GruVars& context_gru, const Vocabulary& vocab,
                                   bool include_api_calls)
    : tape_(tape),
      embedding_(embedding),
      forward_(forward),
      backward_(backward),
      context_gru_(context_gru),
      vocab_(vocab),
      include_api_calls_(include_api_calls) {}

template <typename Real>
const UtteranceEncoding& DialogEncoder<Real>::utterance(std::size_t key, const Tokens& tokens) {
  auto it = utterances_.find(key);
  if (it != utterances_.end()) return it->second;
  Var embeds = embed_tokens(tape_, embedding_, tokens, vocab_);
  return utterances_.emplace(key, encode_utterance(tape_, forward_, backward_, embeds)).first->second;
}

template <typename Real>
ContextEncoding DialogEncoder<Real>::encode(const std::vector<Turn>& turns, std::size_t turn_index) {
  if (turn_index > turns.size()) throw std::out_of_range("encode: turn index past the dialog");
  ContextEncoding ctx;
  for (std::size_t i = 0; i < turn_index; ++i) {
    if (turns[i].is_api_call && !include_api_calls_) continue;
    ctx.source_turns.push_back(i);
    ctx.token_grid.push_back(turns[i].text);
  }
  if (ctx.source_turns.empty()) {
    ctx.source_turns.push_back(ContextEncoding::kSilence);
    ctx.token_grid.push_back(Tokens{std::string(kSilenceToken)});
  }
  for (std::size_t u = 0; u < ctx.source_turns.size(); ++u) {
    const auto& enc = utterance(ctx.source_turns[u], ctx.token_grid[u]);
    ctx.utterance_word_states.push_back(enc.word_states);
    ctx.utterance_reprs.push_back(enc.repr);
  }
  ctx.word_states = ctx.utterance_word_states.size() == 1 ? ctx.utterance_word_states[0]
                                                          : tape_.concat_rows(ctx.utterance_word_states);

  // Extend the shared top-level chain; it is a prefix whenever the context
  // is made of real turns.
  if (ctx.source_turns[0] == ContextEncoding::kSilence) {
    ctx.context_state = encode_context(tape_, context_gru_, ctx.utterance_reprs);
    return ctx;
  }
  std::size_t common = 0;
  while (common < chain_turns_.size() && common < ctx.source_turns.size() &&
         chain_turns_[common] == ctx.source_turns[common])
    ++common;
  chain_turns_.resize(common);
  chain_states_.resize(common);
  for (std::size_t u = common; u < ctx.source_turns.size(); ++u) {
    Var prev = u == 0 ? tape_.zeros({context_gru_.hidden_size}) : chain_states_[u - 1];
    chain_states_.push_back(gru_cell(tape_, context_gru_, ctx.utterance_reprs[u], prev));
    chain_turns_.push_back(ctx.source_turns[u]);
  }
  ctx.context_state = chain_states_[ctx.source_turns.size() - 1];
  return ctx;
}

#define MLMEM_INSTANTIATE(Real)                                                                       \
  template Var embed_tokens<Real>(Tape<Real>&, Tensor<Real>&, const Tokens&, const Vocabulary&);     \
  template UtteranceEncoding encode_utterance<Real>(Tape<Real>&, const GruVars&, const GruVars&, Var); \
  template Var encode_context<Real>(Tape<Real>&, const GruVars&, const std::vector<Var>&);           \
  template class DialogEncoder<Real>;

MLMEM_INSTANTIATE(float)
MLMEM_INSTANTIATE(double)

#undef MLMEM_INSTANTIATE

}  // namespace mlmem
