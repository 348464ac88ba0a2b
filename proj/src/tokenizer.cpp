#include "flns/tokenizer.hpp"

#include <algorithm>
#include <set>

#include "flns/errors.hpp"

namespace flns {

const std::vector<std::string> Tokenizer::kDefaultSpecials = {std::string(kBos),
                                                               std::string(kEos)};

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

}  // namespace

std::vector<std::pair<std::size_t, std::string_view>> split_words(std::string_view text) {
  std::vector<std::pair<std::size_t, std::string_view>> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.emplace_back(start, text.substr(start, i - start));
  }
  return words;
}

Tokenizer::Tokenizer(std::vector<std::string> entries, std::vector<bool> special_flags)
    : entries_(std::move(entries)), special_(std::move(special_flags)) {
  if (special_.size() != entries_.size()) {
    throw Error(ErrorCode::kInvalidConfig, "tokenizer special flags do not match entries");
  }
  index_.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.empty() || std::any_of(e.begin(), e.end(), is_space)) {
      throw Error(ErrorCode::kInvalidConfig, "invalid tokenizer entry '" + e + "'");
    }
    if (!index_.emplace(e, static_cast<TokenId>(i)).second) {
      throw Error(ErrorCode::kInvalidConfig, "duplicate tokenizer entry '" + e + "'");
    }
  }
}

Tokenizer Tokenizer::from_documents(std::span<const std::string> documents,
                                    std::span<const std::string> specials) {
  std::set<std::string> words;
  for (const auto& doc : documents) {
    for (const auto& [offset, word] : split_words(doc)) words.emplace(word);
  }
  std::vector<std::string> entries(specials.begin(), specials.end());
  std::vector<bool> flags(entries.size(), true);
  for (const auto& w : words) {
    if (std::find(specials.begin(), specials.end(), w) != specials.end()) continue;
    entries.push_back(w);
    flags.push_back(false);
  }
  return Tokenizer(std::move(entries), std::move(flags));
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  auto words = split_words(text);
  if (words.empty()) throw Error(ErrorCode::kEmptyInput, "nothing to tokenize");
  std::vector<TokenId> ids;
  ids.reserve(words.size());
  for (const auto& [offset, word] : words) {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) {
      throw Error(ErrorCode::kUnknownSymbol, "unknown symbol '" + std::string(word) +
                                                 "' at byte offset " + std::to_string(offset));
    }
    ids.push_back(it->second);
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += text(ids[i]);
  }
  return out;
}

std::optional<TokenId> Tokenizer::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Tokenizer::text(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) {
    throw Error(ErrorCode::kRangeError, "token id " + std::to_string(id) + " out of range");
  }
  return entries_[static_cast<std::size_t>(id)];
}

bool Tokenizer::is_special(TokenId id) const {
  text(id);
  return special_[static_cast<std::size_t>(id)];
}

}  // namespace flns
