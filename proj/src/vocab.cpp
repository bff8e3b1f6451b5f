#include "mlmem/vocab.hpp"

#include <cctype>
#include <sstream>

namespace mlmem {

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string join_tokens(const Tokens& tokens, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.append(sep);
    out.append(tokens[i]);
  }
  return out;
}

std::string canonical_entity(std::string_view value) {
  return join_tokens(tokenize(value), "_");
}

Tokens split_entities(const Tokens& tokens) {
  Tokens out;
  for (const auto& tok : tokens) {
    std::string part;
    for (char ch : tok) {
      if (ch == '_') {
        if (!part.empty()) out.push_back(std::move(part));
        part.clear();
      } else {
        part.push_back(ch);
      }
    }
    if (!part.empty()) out.push_back(std::move(part));
  }
  return out;
}

Vocabulary::Vocabulary() {
  add(std::string(kPadToken));
  add(std::string(kUnkToken));
  add(std::string(kBosToken));
  add(std::string(kEosToken));
}

std::size_t Vocabulary::add(const std::string& word) {
  auto it = index_.find(word);
  if (it != index_.end()) return it->second;
  words_.push_back(word);
  index_.emplace(word, words_.size() - 1);
  return words_.size() - 1;
}

std::size_t Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

void Vocabulary::add_decode_word(const std::string& word) {
  std::size_t wid = add(word);
  if (decode_index_.count(wid)) return;
  decode_index_.emplace(wid, decode_ids_.size());
  decode_ids_.push_back(wid);
}

std::optional<std::size_t> Vocabulary::decode_index(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) return std::nullopt;
  auto d = decode_index_.find(it->second);
  if (d == decode_index_.end()) return std::nullopt;
  return d->second;
}

}  // namespace mlmem
