#include "flns/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include "flns/errors.hpp"

namespace flns {

std::vector<std::string> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open corpus " + path);
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!split_words(line).empty()) docs.push_back(line);
  }
  return docs;
}

void write_corpus(const std::string& path, const std::vector<std::string>& documents) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write corpus " + path);
  for (const auto& d : documents) out << d << '\n';
}

std::vector<std::vector<TokenId>> tokenize_documents(const Tokenizer& tokenizer,
                                                     const std::vector<std::string>& documents) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(documents.size());
  for (const auto& d : documents) out.push_back(tokenizer.encode(d));
  return out;
}

Tokenizer TemplateLanguage::tokenizer() const {
  std::vector<std::string> words;
  for (const auto& p : phrases) words.insert(words.end(), p.begin(), p.end());
  std::string joined;
  for (const auto& w : words) joined += w + " ";
  const std::vector<std::string> docs{joined};
  return Tokenizer::from_documents(docs);
}

TemplateLanguage make_template_language(const TemplateOptions& options, std::uint64_t seed) {
  if (options.key_length < 1 || options.key_pool < 2 || options.continuation_length < 1 || options.filler_words < 1 ||
      options.phrases < 0) {
    throw Error(ErrorCode::kInvalidConfig, "invalid template language options");
  }
  static const std::string kConsonants = "bdfgklmnprstvz";
  static const std::string kVowels = "aeiou";
  TemplateLanguage lang;
  std::set<std::string> reserved;
  if (options.include_named_phrases) {
    lang.phrases = {
        {"alpha", "beta", "gamma", "delta"},
        {"madison", "square", "garden", "is", "in", "new", "york", "."},
        {"back", "to", "the", "future", "1985"},
        {"marty", "mcfly", "from", "hill", "valley"},
    };
    lang.key_lengths.assign(lang.phrases.size(), 1);
    for (const auto& p : lang.phrases) reserved.insert(p.begin(), p.end());
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_c(0, kConsonants.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_v(0, kVowels.size() - 1);
  auto fresh_word = [&]() {
    for (;;) {
      std::string w;
      for (int s = 0; s < 2; ++s) {
        w += kConsonants[pick_c(rng)];
        w += kVowels[pick_v(rng)];
      }
      if (reserved.insert(w).second) return w;
    }
  };
  double n_keys = 1.0;
  for (int i = 0; i < options.key_length; ++i) n_keys *= options.key_pool;
  if (n_keys < options.phrases) throw Error(ErrorCode::kInvalidConfig, "key space smaller than phrase count");

  for (int i = 0; i < options.key_pool; ++i) lang.key_words.push_back(fresh_word());
  for (int i = 0; i < options.filler_words; ++i) lang.filler_words.push_back(fresh_word());
  std::uniform_int_distribution<std::size_t> pick_k(0, lang.key_words.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_f(0, lang.filler_words.size() - 1);
  std::set<std::vector<std::size_t>> used_keys, used_tails;
  for (int i = 0; i < options.phrases; ++i) {
    std::vector<std::size_t> key(static_cast<std::size_t>(options.key_length));
    do {
      for (auto& k : key) k = pick_k(rng);
    } while (!used_keys.insert(key).second);
    std::vector<std::size_t> tail(static_cast<std::size_t>(options.continuation_length));
    do {
      for (auto& f : tail) f = pick_f(rng);
    } while (!used_tails.insert(tail).second && used_tails.size() < 100000);
    std::vector<std::string> p;
    for (const std::size_t k : key) p.push_back(lang.key_words[k]);
    for (const std::size_t f : tail) p.push_back(lang.filler_words[f]);
    lang.phrases.push_back(std::move(p));
    lang.key_lengths.push_back(static_cast<std::size_t>(options.key_length));
  }
  return lang;
}

TemplateDocuments generate_documents(const TemplateLanguage& language, int n_documents, int min_tokens,
                                     int max_tokens, std::uint64_t seed) {
  if (language.phrases.empty()) throw Error(ErrorCode::kInsufficientData, "language has no phrases");
  std::size_t longest = 0;
  for (const auto& p : language.phrases) longest = std::max(longest, p.size());
  if (min_tokens < 1 || max_tokens < min_tokens || static_cast<std::size_t>(max_tokens) < longest) {
    throw Error(ErrorCode::kInvalidConfig, "invalid document length bounds");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, language.phrases.size() - 1);
  std::uniform_int_distribution<int> length(min_tokens, max_tokens);
  TemplateDocuments out;
  for (int d = 0; d < n_documents; ++d) {
    const auto target = static_cast<std::size_t>(length(rng));
    std::vector<std::string> words;
    std::vector<bool> det;
    for (;;) {
      const std::size_t phrase = pick(rng);
      const auto& p = language.phrases[phrase];
      if (!words.empty() && words.size() + p.size() > target) break;
      const std::size_t key = language.key_lengths.empty() ? 1 : language.key_lengths[phrase];
      for (std::size_t i = 0; i < p.size(); ++i) {
        words.push_back(p[i]);
        det.push_back(i + 1 >= key && i + 1 < p.size());
      }
      if (words.size() >= target) break;
    }
    // Truncation can only happen when the first phrase is longer than target.
    if (words.size() > static_cast<std::size_t>(max_tokens)) {
      words.resize(static_cast<std::size_t>(max_tokens));
      det.resize(static_cast<std::size_t>(max_tokens));
    }
    det.back() = false;
    std::string text;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) text += ' ';
      text += words[i];
    }
    out.documents.push_back(std::move(text));
    out.deterministic.push_back(std::move(det));
  }
  return out;
}

}  // namespace flns
