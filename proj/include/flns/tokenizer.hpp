#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace flns {

using TokenId = std::int32_t;

// Closed-vocabulary word tokenizer. Text is normalized by splitting on runs of
// ASCII whitespace; every resulting word must be a vocabulary entry.
class Tokenizer {
 public:
  Tokenizer() = default;
  // `entries[i]` is the text of token id i. Entries must be unique, non-empty
  // and free of whitespace.
  Tokenizer(std::vector<std::string> entries, std::vector<bool> special_flags);

  // Specials first (in the given order), then every distinct corpus word in
  // lexicographic order.
  static Tokenizer from_documents(std::span<const std::string> documents,
                                  std::span<const std::string> specials = kDefaultSpecials);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::optional<TokenId> find(std::string_view word) const;
  const std::string& text(TokenId id) const;
  bool is_special(TokenId id) const;
  std::size_t size() const { return entries_.size(); }

  const std::vector<std::string>& entries() const { return entries_; }
  const std::vector<bool>& special_flags() const { return special_; }

  bool operator==(const Tokenizer& other) const {
    return entries_ == other.entries_ && special_ == other.special_;
  }

  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";
  static const std::vector<std::string> kDefaultSpecials;

 private:
  std::vector<std::string> entries_;
  std::vector<bool> special_;
  std::unordered_map<std::string, TokenId> index_;
};

// Splits on ASCII whitespace; returns (byte offset, word) pairs.
std::vector<std::pair<std::size_t, std::string_view>> split_words(std::string_view text);

}  // namespace flns
