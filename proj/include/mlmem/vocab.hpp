#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mlmem/kb_types.hpp"

namespace mlmem {

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kBosToken = "<bos>";
inline constexpr std::string_view kEosToken = "<eos>";
inline constexpr std::string_view kApiCallToken = "api_call";
inline constexpr std::string_view kSilenceToken = "<silence>";

/// Lowercase + whitespace split.
Tokens tokenize(std::string_view text);
std::string join_tokens(const Tokens& tokens, std::string_view sep = " ");
/// Lowercase and join internal whitespace with underscores so a multi-word
/// entity becomes a single copyable token.
std::string canonical_entity(std::string_view value);
/// Inverse of canonical_entity for scoring against raw references.
Tokens split_entities(const Tokens& tokens);

/// Word <-> id table for embeddings, plus the two subsets the model needs:
/// the decode (generation) vocabulary and the entity lexicon used for F1.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kBos = 2;
  static constexpr std::size_t kEos = 3;

  Vocabulary();

  std::size_t add(const std::string& word);
  /// Id of the word, or kUnk.
  std::size_t id(const std::string& word) const;
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  const std::string& word(std::size_t id) const { return words_.at(id); }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  /// Decode vocabulary: ordered embedding ids that the generator can emit.
  void add_decode_word(const std::string& word);
  const std::vector<std::size_t>& decode_ids() const { return decode_ids_; }
  std::size_t decode_size() const { return decode_ids_.size(); }
  std::optional<std::size_t> decode_index(const std::string& word) const;

  std::set<std::string>& entities() { return entities_; }
  const std::set<std::string>& entities() const { return entities_; }
  bool is_entity(const std::string& word) const { return entities_.count(word) > 0; }

  bool operator==(const Vocabulary& other) const {
    return words_ == other.words_ && decode_ids_ == other.decode_ids_ && entities_ == other.entities_;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::size_t> decode_ids_;
  std::unordered_map<std::size_t, std::size_t> decode_index_;
  std::set<std::string> entities_;
};

}  // namespace mlmem
