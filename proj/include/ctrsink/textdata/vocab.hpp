#pragma once

#include <array>
#include <cstddef>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctrsink/errors.hpp"

namespace ctrsink {

using TokenId = std::size_t;

// Whitespace tokenizer vocabulary. Reserved ids occupy [0, kReservedCount)
// and are never reassigned; corpus tokens follow in first-appearance order.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kSink = 4;
  static constexpr std::size_t kReservedCount = 5;
  static constexpr std::array<std::string_view, kReservedCount> kReservedNames = {"<pad>", "<unk>", "<bos>", "<sep>",
                                                                                    "<sink>"};

  Vocab() {
    for (auto name : kReservedNames) add(std::string(name));
  }

  // Rebuilds a vocabulary from its id-ordered token list (checkpoint form).
  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < kReservedCount) throw InvalidArgument("Vocab: token list shorter than reserved block");
    for (std::size_t i = 0; i < kReservedCount; ++i)
      if (tokens[i] != kReservedNames[i]) throw InvalidArgument("Vocab: reserved ids out of place");
    Vocab v;
    for (std::size_t i = kReservedCount; i < tokens.size(); ++i) {
      if (v.ids_.contains(tokens[i])) throw InvalidArgument("Vocab: duplicate token " + tokens[i]);
      v.add(tokens[i]);
    }
    return v;
  }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return ids_.contains(token); }
  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw InvalidArgument("Vocab: id out of range");
    return tokens_[id];
  }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  friend Vocab build_vocab(const std::vector<std::string>&, std::size_t);

  TokenId add(std::string token) {
    const TokenId id = tokens_.size();
    ids_.emplace(token, id);
    tokens_.push_back(std::move(token));
    return id;
  }

  std::unordered_map<std::string, TokenId> ids_;
  std::vector<std::string> tokens_;
};

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(std::move(tok));
  return out;
}

// Tokens seen at least `min_count` times get ids; the rest fall back to <unk>.
inline Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t min_count = 1) {
  if (corpus.empty()) throw InvalidArgument("build_vocab: empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  std::vector<std::string> order;
  for (const auto& line : corpus)
    for (auto& tok : split_whitespace(line))
      if (counts[tok]++ == 0) order.push_back(std::move(tok));
  Vocab v;
  for (const auto& tok : order)
    if (counts[tok] >= min_count && !v.contains(tok)) v.add(tok);
  return v;
}

inline std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& tok : split_whitespace(text)) ids.push_back(vocab.id(tok));
  return ids;
}

inline std::string detokenize(const std::vector<TokenId>& ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

}  // namespace ctrsink
