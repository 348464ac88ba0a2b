#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flns/corpus.hpp"
#include "flns/distribution.hpp"
#include "flns/errors.hpp"
#include "flns/evalkit.hpp"
#include "flns/model.hpp"

namespace flns::testing {

// A two-layer model trained on a small template corpus. Built once per
// process; every accessor returns the same instance.
struct ToyWorld {
  TemplateLanguage language;
  Tokenizer tokenizer;
  TemplateDocuments generated;
  std::vector<std::vector<TokenId>> documents;
  DocumentSplit split;
  TransformerModel model;
  std::vector<EvalSample> train_samples;
  std::vector<EvalSample> test_samples;
};

const ToyWorld& toy_world();

// Probes for every (kind, layer 1..L, offset 0..3), one learned prompt per
// layer, the default fixed prompts and the train-split bigram table, all
// for toy_world(). Built once, lightly trained.
const Artifacts& toy_artifacts();

// Untrained model with the given shape over a synthetic vocabulary.
TransformerModel random_model(int n_layers, int d_model, int n_heads, int d_vocab, int max_seq_len,
                              PositionalScheme scheme = PositionalScheme::kLearnedAbsolute, std::uint64_t seed = 1);

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const { return path_ + "/" + name; }

 private:
  std::string path_;
};

inline std::span<const float> row_span(const RowVector<float>& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

inline TokenId top1(const RowVector<float>& v) { return argmax(row_span(v)); }

// Code of the flns::Error thrown by `f`, or nullopt when it returns normally.
inline std::optional<ErrorCode> error_code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

double max_abs_diff(const Matrix<float>& a, const Matrix<float>& b);

}  // namespace flns::testing
