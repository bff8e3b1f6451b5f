#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <vector>

#include "mlmem/corpus.hpp"
#include "mlmem/model.hpp"
#include "mlmem/numerics.hpp"
#include "mlmem/vocab.hpp"

namespace mlmem {

/// Embedding rows for a token sequence; unknown tokens read the <unk> row.
/// Throws "empty utterance" for an empty sequence.
template <typename Real>
Var embed_tokens(Tape<Real>& tape, Tensor<Real>& embedding, const Tokens& tokens, const Vocabulary& vocab);

struct UtteranceEncoding {
  Var word_states;  // [len x 2H], row j = forward_j ++ backward_j
  Var repr;         // [2H], last forward state ++ last backward state
};

/// Bidirectional GRU over one utterance's embedding rows [len x E].
template <typename Real>
UtteranceEncoding encode_utterance(Tape<Real>& tape, const GruVars& forward, const GruVars& backward, Var embeds);

/// Final state of the top-level GRU run over utterance representations,
/// starting from a zero state.
template <typename Real>
Var encode_context(Tape<Real>& tape, const GruVars& gru, const std::vector<Var>& utterance_reprs);

/// Everything the decoder reads about the dialog history of one turn.
struct ContextEncoding {
  static constexpr std::size_t kSilence = std::numeric_limits<std::size_t>::max();

  std::vector<Tokens> token_grid;
  /// Turn index each utterance came from, or kSilence for the placeholder
  /// used when nothing precedes the turn.
  std::vector<std::size_t> source_turns;
  std::vector<Var> utterance_word_states;
  std::vector<Var> utterance_reprs;
  Var word_states;    // all utterances stacked, [N x 2H]
  Var context_state;  // [H]

  std::size_t n_words() const {
    std::size_t n = 0;
    for (const auto& u : token_grid) n += u.size();
    return n;
  }
};

/// Encodes successive turns of one dialog on one tape. Utterance encodings
/// and top-level GRU states are computed once and shared by every later
/// turn, since a turn's context is a prefix of the next turn's.
template <typename Real>
class DialogEncoder {
 public:
  DialogEncoder(Tape<Real>& tape, Tensor<Real>& embedding, const GruVars& forward, const GruVars& backward,
                const GruVars& context_gru, const Vocabulary& vocab, bool include_api_calls);

  /// Context for predicting turns[turn_index]: every earlier turn, in order.
  /// `turns` may grow between calls but earlier turns must not change.
  ContextEncoding encode(const std::vector<Turn>& turns, std::size_t turn_index);

 private:
  const UtteranceEncoding& utterance(std::size_t key, const Tokens& tokens);

  Tape<Real>& tape_;
  Tensor<Real>& embedding_;
  GruVars forward_, backward_, context_gru_;
  const Vocabulary& vocab_;
  bool include_api_calls_;
  std::map<std::size_t, UtteranceEncoding> utterances_;
  std::vector<std::size_t> chain_turns_;  // turns fed to the top-level GRU so far
  std::vector<Var> chain_states_;
};

}  // namespace mlmem
