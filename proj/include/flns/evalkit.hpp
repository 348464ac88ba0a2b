#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "flns/intervene.hpp"
#include "flns/model.hpp"
#include "flns/probes.hpp"
#include "flns/sample.hpp"

namespace flns {

// ---- sampling ---------------------------------------------------------------

struct DocumentSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Seeded partition of document indices; the two sides never share a document.
DocumentSplit split_documents(std::size_t n_documents, double test_fraction, std::uint64_t seed);

// Draws `count` positions uniformly from every (document, T) in `documents`
// where the model's argmax next-token prediction matches the corpus and the
// context plus a greedy continuation of max_offset+1 tokens fits in
// max_seq_len. Throws SamplingExhausted when fewer positions qualify.
std::vector<EvalSample> sample_positions(const TransformerModel& model,
                                         const std::vector<std::vector<TokenId>>& corpus,
                                         std::span<const std::size_t> documents, std::size_t count, int max_offset,
                                         std::uint64_t seed);

double mean_context_length(std::span<const EvalSample> samples);

// ---- bigram baseline --------------------------------------------------------

class BigramTable {
 public:
  // Counts adjacent pairs within each document (never across documents).
  static BigramTable build(const std::vector<std::vector<TokenId>>& corpus);

  std::uint64_t count(TokenId first, TokenId second) const;
  // Most frequent successor, lowest id on ties; nullopt when `token` was
  // never followed by anything.
  std::optional<TokenId> successor(TokenId token) const;

  const std::map<std::pair<TokenId, TokenId>, std::uint64_t>& counts() const { return counts_; }

 private:
  std::map<std::pair<TokenId, TokenId>, std::uint64_t> counts_;
  std::map<TokenId, TokenId> successor_;
};

// ---- metrics ----------------------------------------------------------------

enum class PrecisionDirection {
  kPredictionInReference,  // argmax(pred) within top-k(ref)
  kReferenceInPrediction,  // argmax(ref) within top-k(pred)
};

bool precision_at_k(std::span<const float> pred, std::span<const float> ref, std::size_t k,
                    PrecisionDirection direction = PrecisionDirection::kPredictionInReference);
// Top-1 token variant, used when a method yields a token rather than a distribution.
bool token_in_top_k(TokenId token, std::span<const float> ref, std::size_t k);

inline constexpr double kSurprisalFloor = 1e-12;
// -ln ref[token] in nats, with probabilities clamped at 1e-12.
double surprisal(std::span<const float> ref, TokenId token);

// ---- token categories -------------------------------------------------------

struct TokenCategories {
  bool lowercase_no_space = false;
  bool lowercase_with_space = false;
  bool uppercase_no_space = false;
  bool uppercase_with_space = false;
  bool len_lt_4 = false;
  bool len_ge_4 = false;
  bool punctuation = false;
  bool numerical = false;
};

inline constexpr std::string_view kDefaultPunctuation = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

// Length excludes a leading space; "lowercase"/"uppercase" need at least one
// letter with all letters in that case; numerical means all digits.
TokenCategories categorize_token(std::string_view text, std::string_view punctuation = kDefaultPunctuation);

inline const std::vector<std::string> kCategoryNames = {
    "lowercase_no_space", "lowercase_with_space", "uppercase_no_space", "uppercase_with_space",
    "len_lt_4",           "len_ge_4",             "punctuation",        "numerical"};
bool category_flag(const TokenCategories& c, std::string_view name);

// ---- calibration ------------------------------------------------------------

struct CalibrationBucket {
  double lower = 0.0;
  double upper = 0.0;  // exclusive except for the last bucket
  std::size_t count = 0;
  double accuracy = 0.0;
};

// Buckets [0,0.3), [0.3,0.6), [0.6,0.9), [0.9,1.0]; empty buckets are omitted.
std::vector<CalibrationBucket> calibration_report(std::span<const double> confidences, const std::vector<bool>& correct);

// ---- evaluation driver ------------------------------------------------------

struct Artifacts {
  std::map<std::tuple<ProbeKind, int, int>, LinearProbe> probes;  // (kind, layer, offset)
  std::map<int, SoftPrompt> soft_prompts;                         // by layer
  std::vector<FixedPrompt> fixed_prompts;
  std::optional<BigramTable> bigram;
};

// Method identifiers: "bigram", "probe-vocab", "probe-hidden", "fixed" (every
// fixed prompt, reported as "fixed:<name>"), "learned".
struct EvalRequest {
  std::vector<std::string> methods{"bigram", "probe-vocab", "probe-hidden", "fixed", "learned"};
  std::vector<int> layers;
  std::vector<int> offsets{0, 1, 2, 3};
  std::vector<std::size_t> ks{1, 5, 10};
  PrecisionDirection direction = PrecisionDirection::kPredictionInReference;
  int category_offset = 1;
  std::string punctuation = std::string(kDefaultPunctuation);
};

struct MetricRow {
  std::string method;
  int layer = 0;  // 0 for the layer-independent bigram baseline
  int offset = 0;
  std::size_t k = 0;  // 0 for surprisal rows
  std::string metric;  // "precision" or "surprisal"
  double value = 0.0;
};

struct CategoryRow {
  std::string method;
  int layer = 0;
  std::string category;
  std::size_t count = 0;
  double accuracy = 0.0;
};

struct CalibrationRow {
  std::string method;
  int layer = 0;
  int offset = 0;
  std::vector<CalibrationBucket> buckets;
  bool monotone = true;
};

struct MetricsReport {
  static constexpr int kSchemaVersion = 1;
  std::size_t sample_count = 0;
  double mean_context_length = 0.0;
  std::vector<MetricRow> rows;
  std::vector<CategoryRow> categories;
  std::vector<CalibrationRow> calibration;
  std::optional<int> best_learned_layer;
  std::map<int, int> learned_peak_layer;  // offset -> layer with best precision@1
  std::vector<std::string> flags;         // soft checks that did not hold
  std::vector<std::string> notes;

  std::optional<double> value(std::string_view method, int layer, int offset, std::size_t k,
                              std::string_view metric) const;
};

MetricsReport evaluate_methods(const TransformerModel& model, std::span<const EvalSample> samples,
                               const Artifacts& artifacts, const EvalRequest& request);

std::string report_to_json(const MetricsReport& report);
std::string report_to_csv(const MetricsReport& report);

}  // namespace flns
