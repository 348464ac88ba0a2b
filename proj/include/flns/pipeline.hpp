#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "flns/corpus.hpp"
#include "flns/evalkit.hpp"
#include "flns/intervene.hpp"
#include "flns/model.hpp"
#include "flns/probes.hpp"
#include "flns/train.hpp"

namespace flns {

// Everything one experiment run needs. Component seeds are derived from
// `seed` (see derived_seed) so a single integer pins the whole pipeline.
struct RunConfig {
  std::string artifact_dir = "artifacts";
  std::string report_dir = "reports";
  std::string corpus_path;         // empty: generate the template corpus
  std::string fixed_prompts_path;  // empty: built-in prompt set
  std::string static_dir;          // served under / by `serve` when set
  std::uint64_t seed = 0;

  TemplateOptions language{.phrases = 160, .key_pool = 20, .filler_words = 100};
  int documents = 1500;
  int min_tokens = 24;
  int max_tokens = 48;

  ModelConfig model{.n_layers = 4, .d_model = 128, .n_heads = 4};  // d_vocab is taken from the tokenizer
  TrainConfig train{.steps = 2000};

  double test_fraction = 0.2;
  std::size_t train_samples = 1000;
  std::size_t test_samples = 500;

  ProbeTrainConfig probes{.learning_rate = 1e-2, .epochs = 200, .patience = 10};
  std::size_t prompt_length = 10;
  int prompt_offset = 1;
  SoftPromptTrainConfig prompts{.steps = 400, .learning_rate = 3e-3};

  // Empty layers means 1..n_layers.
  EvalRequest eval;

  std::string host = "127.0.0.1";
  int port = 8080;

  std::vector<int> eval_layers() const;
  // Canonical JSON of every field; the manifest hashes this text.
  std::string to_json() const;
};

enum class SeedRole : std::uint64_t {
  kLanguage = 1,
  kCorpus,
  kModelInit,
  kTraining,
  kSplit,
  kTrainSamples,
  kTestSamples,
  kProbes,
  kPrompts,
};
std::uint64_t derived_seed(std::uint64_t seed, SeedRole role, std::uint64_t index = 0);

// Missing keys keep their defaults; unknown keys and malformed values throw
// Error(kInvalidConfig).
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::string& path);
// Fills seeds, layer list and paths into the component configs.
void finalize_run_config(RunConfig& config);

std::vector<FixedPromptSpec> default_fixed_prompt_specs();

// Artifact file names inside the artifact directory.
std::string model_path(const RunConfig& config);
std::string corpus_file(const RunConfig& config);
std::string prompt_path(const RunConfig& config, int layer);
std::string probe_path(const RunConfig& config, ProbeKind kind, int layer, int offset);

struct CorpusData {
  Tokenizer tokenizer;
  std::vector<std::string> documents;
  std::vector<std::vector<TokenId>> tokens;
  std::vector<std::vector<bool>> deterministic;  // empty for user corpora
  DocumentSplit split;
};

// The configured corpus: a user file, else the generated template corpus.
CorpusData build_corpus(const RunConfig& config);
// The corpus the stored model was trained on (artifact copy), tokenized with
// the model's tokenizer.
CorpusData stored_corpus(const RunConfig& config, const Tokenizer& tokenizer);

// Positions from the train and test documents respectively, each covering
// offsets up to the largest evaluated one.
std::vector<EvalSample> draw_train_samples(const RunConfig& config, const TransformerModel& model,
                                           const CorpusData& corpus);
std::vector<EvalSample> draw_test_samples(const RunConfig& config, const TransformerModel& model,
                                          const CorpusData& corpus);

struct StageSummary {
  std::vector<std::string> outputs;  // paths of the files written
  std::vector<std::pair<std::string, double>> metrics;
};

StageSummary train_model_stage(const RunConfig& config);
StageSummary train_probes_stage(const RunConfig& config);
StageSummary train_prompts_stage(const RunConfig& config);
StageSummary eval_stage(const RunConfig& config);

// Every probe and prompt found in the artifact directory, the configured
// fixed prompts and the bigram table of the stored corpus.
Artifacts load_artifacts(const RunConfig& config, const TransformerModel& model);

// Writes {directory}/manifest_{command}.json: command, config hash, seeds,
// format versions, stage metrics and an FNV-1a checksum per output file.
std::string write_manifest(const RunConfig& config, const std::string& command, const StageSummary& summary,
                           const std::string& directory);

std::uint64_t fnv1a(std::string_view bytes);
std::uint64_t file_checksum(const std::string& path);

}  // namespace flns
