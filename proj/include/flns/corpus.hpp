#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flns/tokenizer.hpp"

namespace flns {

// Corpus files are UTF-8 text, one document per line.
std::vector<std::string> read_corpus(const std::string& path);
void write_corpus(const std::string& path, const std::vector<std::string>& documents);

std::vector<std::vector<TokenId>> tokenize_documents(const Tokenizer& tokenizer,
                                                     const std::vector<std::string>& documents);

// A closed set of fixed phrases; documents are random concatenations of
// phrases. The first key_lengths[i] tokens of phrase i identify it and the
// rest of the phrase is fully determined by that key.
struct TemplateLanguage {
  std::vector<std::vector<std::string>> phrases;
  std::vector<std::size_t> key_lengths;
  std::vector<std::string> key_words;
  std::vector<std::string> filler_words;

  // Every word that can appear, plus the default specials.
  Tokenizer tokenizer() const;
};

// Generated phrases are a key of `key_length` words drawn from a pool of
// `key_pool` words followed by `continuation_length` words from a shared
// filler pool. Keys are distinct, so the whole key (and no shorter suffix of
// it in general) fixes the continuation, while any single filler is followed
// by many different words across the corpus.
struct TemplateOptions {
  int phrases = 48;
  int key_length = 2;
  int key_pool = 8;
  int continuation_length = 3;
  int filler_words = 16;
  bool include_named_phrases = true;
};

TemplateLanguage make_template_language(const TemplateOptions& options, std::uint64_t seed);

struct TemplateDocuments {
  std::vector<std::string> documents;
  // deterministic[d][t]: token t+1 of document d follows from the context.
  std::vector<std::vector<bool>> deterministic;
};

TemplateDocuments generate_documents(const TemplateLanguage& language, int n_documents, int min_tokens,
                                     int max_tokens, std::uint64_t seed);

}  // namespace flns
