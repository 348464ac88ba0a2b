#include <cmath>
#include <cstring>
#include <random>

#include "flns/distribution.hpp"
#include "flns/errors.hpp"
#include "flns/model.hpp"
#include "json.hpp"

namespace flns {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1 || max_seq_len < 1) fail("counts must be positive");
  if (d_vocab < 2) fail("d_vocab must be >= 2");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (positional == PositionalScheme::kRotary && head_dim() % 2 != 0) fail("rotary needs an even head_dim");
}

std::string positional_scheme_name(PositionalScheme scheme) {
  return scheme == PositionalScheme::kRotary ? "rotary" : "learned-absolute";
}

PositionalScheme parse_positional_scheme(std::string_view name) {
  if (name == "learned-absolute") return PositionalScheme::kLearnedAbsolute;
  if (name == "rotary") return PositionalScheme::kRotary;
  throw Error(ErrorCode::kInvalidConfig, "unknown positional scheme '" + std::string(name) + "'");
}

std::string config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_vocab"] = c.d_vocab;
  j["max_seq_len"] = c.max_seq_len;
  j["positional_scheme"] = positional_scheme_name(c.positional);
  j["seed"] = c.seed;
  return j.dump();
}

ModelConfig config_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_vocab = j.at("d_vocab").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.positional = parse_positional_scheme(j.value("positional_scheme", "learned-absolute"));
    c.seed = j.value("seed", std::uint64_t{0});
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("model config: ") + e.what());
  }
}

TransformerModel init_model(const ModelConfig& config, const Tokenizer& tokenizer) {
  config.validate();
  if (tokenizer.size() != static_cast<std::size_t>(config.d_vocab)) {
    throw Error(ErrorCode::kInvalidConfig, "tokenizer size " + std::to_string(tokenizer.size()) +
                                               " does not match d_vocab " + std::to_string(config.d_vocab));
  }
  TransformerModel model{config, tokenizer, Weights<float>::zeros(config)};
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  const float proj_scale = 1.0f / std::sqrt(2.0f * static_cast<float>(config.n_layers));
  auto fill = [&](Matrix<float>& m, float scale) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng) * scale;
  };
  model.weights.visit([&](const std::string& name, Matrix<float>& m) {
    if (name.ends_with("_gain")) {
      m.setOnes();
    } else if (name.ends_with("_bias")) {
      m.setZero();
    } else if (name.ends_with("out_weight") || name.ends_with("proj_weight")) {
      fill(m, proj_scale);
    } else {
      fill(m, 1.0f);
    }
  });
  return model;
}

std::vector<TokenId> tokenize(const TransformerModel& model, std::string_view text) {
  return model.tokenizer.encode(text);
}

std::string detokenize(const TransformerModel& model, std::span<const TokenId> ids) {
  return model.tokenizer.decode(ids);
}

Trace<float> forward_trace(const TransformerModel& model, std::span<const TokenId> tokens) {
  return model.network().forward({.tokens = tokens});
}

GenerationResult greedy_generate(const TransformerModel& model, std::span<const TokenId> tokens,
                                 std::size_t n) {
  if (n == 0) throw Error(ErrorCode::kRangeError, "generation length must be >= 1");
  if (tokens.size() + n > static_cast<std::size_t>(model.config.max_seq_len)) {
    throw Error(ErrorCode::kSequenceTooLong, "prompt of " + std::to_string(tokens.size()) + " plus " +
                                                 std::to_string(n) + " new tokens exceeds max_seq_len");
  }
  const auto net = model.network();
  GenerationResult result;
  std::vector<TokenId> seq(tokens.begin(), tokens.end());
  for (std::size_t i = 0; i < n; ++i) {
    const Trace<float> trace = net.forward({.tokens = seq});
    RowVector<float> dist = trace.dists.row(trace.dists.rows() - 1);
    const TokenId next = argmax(std::span<const float>(dist.data(), static_cast<std::size_t>(dist.size())));
    result.new_tokens.push_back(next);
    result.step_dists.push_back(std::move(dist));
    seq.push_back(next);
  }
  result.final_trace = net.forward({.tokens = seq});
  return result;
}

Trace<float> forward_patched(const TransformerModel& model, std::span<const TokenId> tokens,
                             const PatchSpec<float>& patch) {
  return model.network().forward({.tokens = tokens, .patch = &patch});
}

Trace<float> forward_with_embedding_overrides(const TransformerModel& model, std::span<const TokenId> tokens,
                                              std::span<const EmbeddingOverride<float>> overrides,
                                              const PatchSpec<float>* patch) {
  return model.network().forward({.tokens = tokens, .overrides = overrides, .patch = patch});
}

OverrideGradient<float> loss_gradient_wrt_overrides(const TransformerModel& model,
                                                    std::span<const TokenId> tokens,
                                                    std::span<const EmbeddingOverride<float>> overrides,
                                                    const PatchSpec<float>* patch, std::size_t readout_position,
                                                    std::span<const double> target) {
  return model.network().kl_gradient({.tokens = tokens, .overrides = overrides, .patch = patch},
                                     readout_position, target);
}

std::uint64_t weights_checksum(const Weights<float>& weights) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  weights.visit([&](const std::string&, const Matrix<float>& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    const std::size_t n = sizeof(float) * static_cast<std::size_t>(m.size());
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  });
  return h;
}

}  // namespace flns
