#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flns/tokenizer.hpp"

namespace flns {

enum class PositionalScheme { kLearnedAbsolute, kRotary };

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_vocab = 2;
  int max_seq_len = 64;
  PositionalScheme positional = PositionalScheme::kLearnedAbsolute;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  int d_ff() const { return 4 * d_model; }
  // Throws Error(kInvalidConfig) when a count is non-positive or shapes are inconsistent.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string positional_scheme_name(PositionalScheme scheme);
PositionalScheme parse_positional_scheme(std::string_view name);
std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(std::string_view text);

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

// Parameters of one pre-norm block. Linear maps are stored input-major
// (x * W), biases and norm parameters as 1 x n rows.
template <typename S>
struct BlockWeights {
  Matrix<S> ln1_gain, ln1_bias;
  Matrix<S> qkv_weight, qkv_bias;
  Matrix<S> out_weight, out_bias;
  Matrix<S> ln2_gain, ln2_bias;
  Matrix<S> fc_weight, fc_bias;
  Matrix<S> proj_weight, proj_bias;
};

template <typename S>
struct Weights {
  Matrix<S> token_embedding;     // d_vocab x d_model
  Matrix<S> position_embedding;  // max_seq_len x d_model; empty under rotary
  std::vector<BlockWeights<S>> blocks;
  Matrix<S> final_gain, final_bias;
  Matrix<S> decoder;  // d_model x d_vocab

  // Declared tensor order; this is also the checkpoint payload order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  static Weights zeros(const ModelConfig& config);

  template <typename T>
  Weights<T> cast() const {
    Weights<T> out;
    out.token_embedding = token_embedding.template cast<T>();
    out.position_embedding = position_embedding.template cast<T>();
    out.blocks.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      auto& o = out.blocks[i];
      o.ln1_gain = b.ln1_gain.template cast<T>();
      o.ln1_bias = b.ln1_bias.template cast<T>();
      o.qkv_weight = b.qkv_weight.template cast<T>();
      o.qkv_bias = b.qkv_bias.template cast<T>();
      o.out_weight = b.out_weight.template cast<T>();
      o.out_bias = b.out_bias.template cast<T>();
      o.ln2_gain = b.ln2_gain.template cast<T>();
      o.ln2_bias = b.ln2_bias.template cast<T>();
      o.fc_weight = b.fc_weight.template cast<T>();
      o.fc_bias = b.fc_bias.template cast<T>();
      o.proj_weight = b.proj_weight.template cast<T>();
      o.proj_bias = b.proj_bias.template cast<T>();
    }
    out.final_gain = final_gain.template cast<T>();
    out.final_bias = final_bias.template cast<T>();
    out.decoder = decoder.template cast<T>();
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix<S>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  bool operator==(const Weights& other) const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("token_embedding"), self.token_embedding);
    if (self.position_embedding.size() > 0) f(std::string("position_embedding"), self.position_embedding);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      f(p + "ln1_gain", b.ln1_gain);
      f(p + "ln1_bias", b.ln1_bias);
      f(p + "qkv_weight", b.qkv_weight);
      f(p + "qkv_bias", b.qkv_bias);
      f(p + "out_weight", b.out_weight);
      f(p + "out_bias", b.out_bias);
      f(p + "ln2_gain", b.ln2_gain);
      f(p + "ln2_bias", b.ln2_bias);
      f(p + "fc_weight", b.fc_weight);
      f(p + "fc_bias", b.fc_bias);
      f(p + "proj_weight", b.proj_weight);
      f(p + "proj_bias", b.proj_bias);
    }
    f(std::string("final_gain"), self.final_gain);
    f(std::string("final_bias"), self.final_bias);
    f(std::string("decoder"), self.decoder);
  }
};

// Every hidden state of a run. hidden[l] holds H^l (T x d_model): layer 0 is
// the embedding plus positional term, layer l >= 1 the residual stream after
// block l. logits/dists are read from hidden[L] through the final norm.
template <typename S>
struct Trace {
  std::vector<TokenId> tokens;
  std::vector<Matrix<S>> hidden;
  Matrix<S> logits;
  Matrix<S> dists;

  std::size_t length() const { return tokens.size(); }
  int n_layers() const { return static_cast<int>(hidden.size()) - 1; }
  RowVector<S> state(int layer, std::size_t position) const {
    return hidden.at(static_cast<std::size_t>(layer)).row(static_cast<Eigen::Index>(position));
  }
  RowVector<S> dist(std::size_t position) const { return dists.row(static_cast<Eigen::Index>(position)); }
};

// Overwrites hidden[layer][position] after block `layer` has run (layer 0:
// the embedding output) and before block layer+1 reads it. Positions are
// 0-based.
template <typename S>
struct PatchSpec {
  int layer = 0;
  std::size_t position = 0;
  RowVector<S> vector;
};

// Replaces the token embedding row at `position` before the positional term
// is added.
template <typename S>
struct EmbeddingOverride {
  std::size_t position = 0;
  RowVector<S> vector;
};

template <typename S>
struct ForwardInputs {
  std::span<const TokenId> tokens;
  std::span<const EmbeddingOverride<S>> overrides = {};
  const PatchSpec<S>* patch = nullptr;
};

template <typename S>
struct BlockCache {
  Matrix<S> ln1_hat, ln1_out;
  std::vector<S> ln1_rstd;
  Matrix<S> q, k, v;  // q and k after rotary (if any)
  std::vector<Matrix<S>> probs;
  Matrix<S> context;
  Matrix<S> ln2_hat, ln2_out;
  std::vector<S> ln2_rstd;
  Matrix<S> fc_pre, fc_act;
};

template <typename S>
struct ForwardCache {
  std::vector<BlockCache<S>> blocks;
  Matrix<S> final_hat, final_out;
  std::vector<S> final_rstd;
  std::vector<TokenId> tokens;
  std::vector<bool> overridden;
  std::optional<std::pair<int, std::size_t>> patch;  // (layer, position)
};

// Gradient of a scalar loss with respect to each embedding override.
template <typename S>
struct OverrideGradient {
  double loss = 0.0;
  std::vector<RowVector<S>> gradients;  // aligned with the overrides passed in
  Trace<S> trace;
};

// Stateless view over (config, weights). Weights are never modified.
template <typename S>
class Network {
 public:
  Network(const ModelConfig& config, const Weights<S>& weights);

  Trace<S> forward(const ForwardInputs<S>& inputs, ForwardCache<S>* cache = nullptr) const;

  // Reverse pass for d(loss)/d(logits). Accumulates parameter gradients into
  // `param_grads` (if non-null) and writes d(loss)/d(H^0) into `d_embed`
  // (if non-null). A patched state is a constant: no gradient flows into
  // the computation it replaced.
  void backward(const ForwardCache<S>& cache, const Matrix<S>& d_logits,
                Weights<S>* param_grads, Matrix<S>* d_embed) const;

  // Loss KL(dists[readout] || target) and its gradient w.r.t. each override.
  OverrideGradient<S> kl_gradient(const ForwardInputs<S>& inputs, std::size_t readout,
                                  std::span<const double> target) const;

  // Mean next-token cross-entropy over the sequence; accumulates gradients
  // of that mean into `grads`.
  double lm_loss_and_gradient(std::span<const TokenId> tokens, Weights<S>& grads) const;

  // softmax(D(norm(h))) or softmax(D(h)) for a single state.
  RowVector<S> decode(const RowVector<S>& h, bool apply_final_norm = true) const;

  const ModelConfig& config() const { return config_; }
  const Weights<S>& weights() const { return weights_; }

 private:
  void validate(const ForwardInputs<S>& inputs) const;

  const ModelConfig& config_;
  const Weights<S>& weights_;
};

extern template class Network<float>;
extern template class Network<double>;

struct TransformerModel {
  ModelConfig config;
  Tokenizer tokenizer;
  Weights<float> weights;

  Network<float> network() const { return Network<float>(config, weights); }
};

// Seeded initialization: N(0, 0.02) for embeddings and linear maps (output
// projections scaled by 1/sqrt(2L)), unit norm gains, zero biases.
TransformerModel init_model(const ModelConfig& config, const Tokenizer& tokenizer);

struct GenerationResult {
  std::vector<TokenId> new_tokens;
  std::vector<RowVector<float>> step_dists;
  Trace<float> final_trace;
};

std::vector<TokenId> tokenize(const TransformerModel& model, std::string_view text);
std::string detokenize(const TransformerModel& model, std::span<const TokenId> ids);

Trace<float> forward_trace(const TransformerModel& model, std::span<const TokenId> tokens);
GenerationResult greedy_generate(const TransformerModel& model, std::span<const TokenId> tokens,
                                 std::size_t n);
Trace<float> forward_patched(const TransformerModel& model, std::span<const TokenId> tokens,
                             const PatchSpec<float>& patch);
Trace<float> forward_with_embedding_overrides(const TransformerModel& model,
                                              std::span<const TokenId> tokens,
                                              std::span<const EmbeddingOverride<float>> overrides,
                                              const PatchSpec<float>* patch = nullptr);
OverrideGradient<float> loss_gradient_wrt_overrides(
    const TransformerModel& model, std::span<const TokenId> tokens,
    std::span<const EmbeddingOverride<float>> overrides, const PatchSpec<float>* patch,
    std::size_t readout_position, std::span<const double> target);

// FNV-1a over every parameter's bytes in declared order.
std::uint64_t weights_checksum(const Weights<float>& weights);

}  // namespace flns
