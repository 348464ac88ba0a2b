#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flns/model.hpp"
#include "flns/sample.hpp"

namespace flns {

struct FixedPrompt {
  std::string name;
  std::string text;  // the string actually tokenized
  std::vector<TokenId> tokens;
  // Set when the configured string was not tokenizable and the toy-vocabulary
  // analogue was used instead.
  bool substituted = false;
  std::string original_text;
};

struct FixedPromptSpec {
  std::string name;
  std::string text;
  std::string analogue;
};

// Config file: {"prompts": [{"name", "text", "analogue"}]}.
std::vector<FixedPromptSpec> read_fixed_prompt_specs(const std::string& path);
std::vector<FixedPromptSpec> parse_fixed_prompt_specs(std::string_view json_text);
std::vector<FixedPrompt> resolve_fixed_prompts(const Tokenizer& tokenizer, std::span<const FixedPromptSpec> specs);

// M learned input-embedding vectors for one source layer.
struct SoftPrompt {
  int layer = 0;
  int trained_offset = 1;
  Matrix<float> vectors;  // M x d_model
  double final_loss = 0.0;
  int steps = 0;

  std::size_t length() const { return static_cast<std::size_t>(vectors.rows()); }
};

// dists[i] is the intervened distribution at prompt position M-1+i
// (i = 0..horizon); top_tokens[i] its argmax.
struct InterventionResult {
  std::vector<RowVector<float>> dists;
  std::vector<TokenId> top_tokens;
  std::size_t sample_id = 0;
  int layer = 0;
};

// Transplants sample.hidden_cache[layer] into the last prompt position at
// `layer`, then reads the prompt run teacher-forced with the sample's own
// continuation: step i runs prompt ++ continuation[0..i) with the same patch.
InterventionResult fixed_intervention(const TransformerModel& model, const FixedPrompt& prompt,
                                      const EvalSample& sample, int layer, int horizon);

// As fixed_intervention, with the prompt given as embedding overrides.
InterventionResult soft_intervention(const TransformerModel& model, const SoftPrompt& soft,
                                     const EvalSample& sample, int horizon);

// Shared mechanics. `donor` is transplanted at (layer, M-1) where M is the
// prompt length; `forced` tokens are appended for steps 1..horizon.
InterventionResult run_intervention(const TransformerModel& model, std::span<const TokenId> prompt_tokens,
                                    const Matrix<float>* prompt_vectors, const RowVector<float>& donor, int layer,
                                    std::span<const TokenId> forced, int horizon);

// Self-rollout for inputs with no reference continuation: read i+1 appends
// the argmax of read i. Returns `steps` distributions (positions M-1 ..
// M-2+steps).
InterventionResult rollout_intervention(const TransformerModel& model, std::span<const TokenId> prompt_tokens,
                                        const Matrix<float>* prompt_vectors, const RowVector<float>& donor, int layer,
                                        int steps);

// Token ids occupying a soft prompt's positions; their embeddings are always
// overridden, so the choice only matters for bookkeeping.
std::vector<TokenId> soft_prompt_placeholders(const SoftPrompt& soft);

struct SoftPromptTrainConfig {
  int steps = 300;
  int batch_size = 16;
  double learning_rate = 1e-2;
  double init_std = 0.02;
  std::uint64_t seed = 0;
};

struct SoftPromptTrainResult {
  SoftPrompt prompt;
  std::vector<double> losses;  // mean batch KL per step
};

SoftPrompt initial_soft_prompt(int layer, std::size_t length, int target_offset, int d_model, double init_std,
                               std::uint64_t seed);

// Minimizes mean KL(yhat_{M+N} || y_{T+N}) over the prompt vectors only; the
// model is read-only (checked by checksum).
SoftPromptTrainResult train_soft_prompt(const TransformerModel& model, std::span<const EvalSample> samples,
                                        int layer, std::size_t length, int target_offset,
                                        const SoftPromptTrainConfig& config);

// Mean KL(yhat_{M+N} || y_{T+N}) of a prompt over samples.
double soft_prompt_loss(const TransformerModel& model, const SoftPrompt& soft, std::span<const EvalSample> samples,
                        int offset);

// "FLNSPRMT", u32 version, i32 layer, u32 length, u32 trained_offset,
// u32 d_model, f64 final_loss, u32 steps, vectors (length x d_model f32).
inline constexpr std::uint32_t kPromptFormatVersion = 1;
void save_soft_prompt(const SoftPrompt& prompt, const std::string& path);
SoftPrompt load_soft_prompt(const std::string& path);
std::vector<char> serialize_soft_prompt(const SoftPrompt& prompt);
SoftPrompt deserialize_soft_prompt(std::vector<char> bytes);

}  // namespace flns
