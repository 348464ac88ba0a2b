#include "flns/intervene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "flns/binary_io.hpp"
#include "flns/distribution.hpp"
#include "flns/errors.hpp"
#include "flns/optim.hpp"
#include "json.hpp"

namespace flns {

namespace {

constexpr std::string_view kPromptMagic = "FLNSPRMT";
constexpr TokenId kPlaceholder = 0;

void check_covers(const EvalSample& sample, int layer, int horizon, const ModelConfig& config) {
  if (layer < 0 || layer > config.n_layers) {
    throw Error(ErrorCode::kPatchOutOfRange, "intervention layer " + std::to_string(layer));
  }
  if (horizon < 0) throw Error(ErrorCode::kRangeError, "negative horizon");
  if (sample.hidden_cache.size() != static_cast<std::size_t>(config.n_layers) + 1) {
    throw Error(ErrorCode::kDimensionError, "sample hidden cache does not match model depth");
  }
  if (sample.continuation.size() < static_cast<std::size_t>(horizon)) {
    throw Error(ErrorCode::kSampleTooShort, "sample " + std::to_string(sample.id) + " has " +
                                                std::to_string(sample.continuation.size()) +
                                                " continuation tokens, horizon needs " + std::to_string(horizon));
  }
}

std::vector<EmbeddingOverride<float>> overrides_from(const Matrix<float>& vectors) {
  std::vector<EmbeddingOverride<float>> out;
  out.reserve(static_cast<std::size_t>(vectors.rows()));
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    out.push_back({static_cast<std::size_t>(i), vectors.row(i)});
  }
  return out;
}

}  // namespace

std::vector<FixedPromptSpec> parse_fixed_prompt_specs(std::string_view json_text) {
  try {
    const auto j = nlohmann::json::parse(json_text);
    std::vector<FixedPromptSpec> specs;
    for (const auto& p : j.at("prompts")) {
      specs.push_back({p.at("name").get<std::string>(), p.at("text").get<std::string>(),
                       p.value("analogue", std::string())});
    }
    return specs;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("fixed prompt config: ") + e.what());
  }
}

std::vector<FixedPromptSpec> read_fixed_prompt_specs(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_fixed_prompt_specs(std::string_view(bytes.data(), bytes.size()));
}

std::vector<FixedPrompt> resolve_fixed_prompts(const Tokenizer& tokenizer, std::span<const FixedPromptSpec> specs) {
  std::vector<FixedPrompt> out;
  for (const auto& spec : specs) {
    FixedPrompt p{spec.name, spec.text, {}, false, spec.text};
    try {
      p.tokens = tokenizer.encode(spec.text);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kUnknownSymbol || spec.analogue.empty()) throw;
      p.text = spec.analogue;
      p.tokens = tokenizer.encode(spec.analogue);
      p.substituted = true;
    }
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

// Runs `steps` reads of the patched prompt; the token appended before read
// i > 0 is next(i - 1, previous argmax).
template <typename Next>
InterventionResult intervene_steps(const TransformerModel& model, std::span<const TokenId> prompt_tokens,
                                   const Matrix<float>* prompt_vectors, const RowVector<float>& donor, int layer,
                                   int steps, Next next) {
  const std::size_t m = prompt_tokens.size();
  if (m == 0) throw Error(ErrorCode::kEmptyInput, "empty prompt");
  if (layer < 0 || layer > model.config.n_layers) {
    throw Error(ErrorCode::kPatchOutOfRange, "intervention layer " + std::to_string(layer));
  }
  if (m + static_cast<std::size_t>(steps) - 1 > static_cast<std::size_t>(model.config.max_seq_len)) {
    throw Error(ErrorCode::kSequenceTooLong, "prompt of " + std::to_string(m) + " plus " +
                                                 std::to_string(steps - 1) + " further tokens exceeds max_seq_len");
  }
  const PatchSpec<float> patch{layer, m - 1, donor};
  const auto overrides = prompt_vectors ? overrides_from(*prompt_vectors) : std::vector<EmbeddingOverride<float>>{};
  const auto net = model.network();

  InterventionResult result;
  result.layer = layer;
  std::vector<TokenId> seq(prompt_tokens.begin(), prompt_tokens.end());
  for (int i = 0; i < steps; ++i) {
    if (i > 0) seq.push_back(next(i - 1, result.top_tokens.back()));
    const auto trace = net.forward({.tokens = seq, .overrides = overrides, .patch = &patch});
    RowVector<float> d = trace.dists.row(static_cast<Eigen::Index>(m - 1 + static_cast<std::size_t>(i)));
    result.top_tokens.push_back(argmax(std::span<const float>(d.data(), static_cast<std::size_t>(d.size()))));
    result.dists.push_back(std::move(d));
  }
  return result;
}

}  // namespace

InterventionResult run_intervention(const TransformerModel& model, std::span<const TokenId> prompt_tokens,
                                    const Matrix<float>* prompt_vectors, const RowVector<float>& donor, int layer,
                                    std::span<const TokenId> forced, int horizon) {
  if (horizon < 0) throw Error(ErrorCode::kRangeError, "negative horizon");
  if (forced.size() < static_cast<std::size_t>(horizon)) {
    throw Error(ErrorCode::kSampleTooShort, "forced continuation shorter than horizon");
  }
  return intervene_steps(model, prompt_tokens, prompt_vectors, donor, layer, horizon + 1,
                         [forced](int i, TokenId) { return forced[static_cast<std::size_t>(i)]; });
}

InterventionResult rollout_intervention(const TransformerModel& model, std::span<const TokenId> prompt_tokens,
                                        const Matrix<float>* prompt_vectors, const RowVector<float>& donor, int layer,
                                        int steps) {
  if (steps < 1) throw Error(ErrorCode::kRangeError, "rollout needs at least one step");
  return intervene_steps(model, prompt_tokens, prompt_vectors, donor, layer, steps,
                         [](int, TokenId previous) { return previous; });
}

std::vector<TokenId> soft_prompt_placeholders(const SoftPrompt& soft) {
  return std::vector<TokenId>(soft.length(), kPlaceholder);
}

InterventionResult fixed_intervention(const TransformerModel& model, const FixedPrompt& prompt,
                                      const EvalSample& sample, int layer, int horizon) {
  check_covers(sample, layer, horizon, model.config);
  auto r = run_intervention(model, prompt.tokens, nullptr, sample.hidden_cache[static_cast<std::size_t>(layer)],
                            layer, sample.continuation, horizon);
  r.sample_id = sample.id;
  return r;
}

InterventionResult soft_intervention(const TransformerModel& model, const SoftPrompt& soft, const EvalSample& sample,
                                     int horizon) {
  check_covers(sample, soft.layer, horizon, model.config);
  if (soft.vectors.cols() != model.config.d_model) {
    throw Error(ErrorCode::kDimensionError, "soft prompt width does not match d_model");
  }
  const std::vector<TokenId> placeholders(soft.length(), kPlaceholder);
  auto r = run_intervention(model, placeholders, &soft.vectors,
                            sample.hidden_cache[static_cast<std::size_t>(soft.layer)], soft.layer,
                            sample.continuation, horizon);
  r.sample_id = sample.id;
  return r;
}

SoftPrompt initial_soft_prompt(int layer, std::size_t length, int target_offset, int d_model, double init_std,
                               std::uint64_t seed) {
  if (length == 0) throw Error(ErrorCode::kRangeError, "soft prompt length must be >= 1");
  SoftPrompt p;
  p.layer = layer;
  p.trained_offset = target_offset;
  p.vectors.resize(static_cast<Eigen::Index>(length), d_model);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, static_cast<float>(init_std));
  for (Eigen::Index i = 0; i < p.vectors.size(); ++i) p.vectors.data()[i] = normal(rng);
  return p;
}

namespace {

struct SampleGradient {
  double loss;
  Matrix<float> grad;  // M x d_model
};

SampleGradient prompt_gradient(const Network<float>& net, const SoftPrompt& soft, const EvalSample& s, int offset) {
  const std::size_t m = soft.length();
  std::vector<TokenId> seq(m, kPlaceholder);
  seq.insert(seq.end(), s.continuation.begin(), s.continuation.begin() + offset);
  const auto overrides = overrides_from(soft.vectors);
  const PatchSpec<float> patch{soft.layer, m - 1, s.hidden_cache[static_cast<std::size_t>(soft.layer)]};
  const auto& ref = s.ref_dists[static_cast<std::size_t>(offset)];
  std::vector<double> target(ref.data(), ref.data() + ref.size());
  // float softmax output sums to 1 only up to rounding; renormalize in double
  const double sum = std::accumulate(target.begin(), target.end(), 0.0);
  for (double& t : target) t /= sum;
  auto g = net.kl_gradient({.tokens = seq, .overrides = overrides, .patch = &patch},
                           m - 1 + static_cast<std::size_t>(offset), target);
  SampleGradient out{g.loss, Matrix<float>(static_cast<Eigen::Index>(m), soft.vectors.cols())};
  for (std::size_t i = 0; i < m; ++i) out.grad.row(static_cast<Eigen::Index>(i)) = g.gradients[i];
  return out;
}

}  // namespace

SoftPromptTrainResult train_soft_prompt(const TransformerModel& model, std::span<const EvalSample> samples, int layer,
                                        std::size_t length, int target_offset, const SoftPromptTrainConfig& config) {
  if (samples.empty()) throw Error(ErrorCode::kInsufficientData, "no training samples");
  if (config.batch_size < 1 || config.steps < 0) throw Error(ErrorCode::kInvalidConfig, "bad soft prompt config");
  if (target_offset < 0) throw Error(ErrorCode::kRangeError, "negative target offset");
  if (length + static_cast<std::size_t>(target_offset) > static_cast<std::size_t>(model.config.max_seq_len)) {
    throw Error(ErrorCode::kSequenceTooLong, "soft prompt plus offset exceeds max_seq_len");
  }
  for (const auto& s : samples) {
    check_covers(s, layer, target_offset, model.config);
    if (s.ref_dists.size() < static_cast<std::size_t>(target_offset) + 1) {
      throw Error(ErrorCode::kSampleTooShort, "sample " + std::to_string(s.id) + " lacks y_{T+N}");
    }
  }
  const std::uint64_t checksum_before = weights_checksum(model.weights);

  SoftPromptTrainResult result;
  result.prompt = initial_soft_prompt(layer, length, target_offset, model.config.d_model, config.init_std, config.seed);
  SoftPrompt& soft = result.prompt;
  const auto net = model.network();

  Adam adam({.learning_rate = config.learning_rate});
  std::array<Matrix<float>*, 1> params{&soft.vectors};
  Matrix<float> grad;
  std::array<const Matrix<float>*, 1> grads{&grad};

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  for (int step = 0; step < config.steps; ++step) {
    grad = Matrix<float>::Zero(soft.vectors.rows(), soft.vectors.cols());
    double loss = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto g = prompt_gradient(net, soft, samples[order[cursor++]], target_offset);
      loss += g.loss;
      grad += g.grad;
    }
    loss /= config.batch_size;
    grad /= static_cast<float>(config.batch_size);
    if (!std::isfinite(loss) || !grad.array().isFinite().all()) {
      throw Error(ErrorCode::kTrainingDiverged, "soft prompt loss became non-finite at step " + std::to_string(step));
    }
    adam.step(params, grads);
    result.losses.push_back(loss);
  }
  soft.steps = config.steps;
  soft.final_loss = result.losses.empty() ? soft_prompt_loss(model, soft, samples, target_offset)
                                          : result.losses.back();
  if (weights_checksum(model.weights) != checksum_before) {
    throw Error(ErrorCode::kInvalidConfig, "model weights changed during soft prompt training");
  }
  return result;
}

double soft_prompt_loss(const TransformerModel& model, const SoftPrompt& soft, std::span<const EvalSample> samples,
                        int offset) {
  if (samples.empty()) return 0.0;
  const auto net = model.network();
  double total = 0.0;
  for (const auto& s : samples) {
    check_covers(s, soft.layer, offset, model.config);
    total += prompt_gradient(net, soft, s, offset).loss;
  }
  return total / static_cast<double>(samples.size());
}

std::vector<char> serialize_soft_prompt(const SoftPrompt& p) {
  BinaryWriter w;
  w.magic(kPromptMagic);
  w.scalar(kPromptFormatVersion);
  w.scalar(static_cast<std::int32_t>(p.layer));
  w.scalar(static_cast<std::uint32_t>(p.vectors.rows()));
  w.scalar(static_cast<std::uint32_t>(p.trained_offset));
  w.scalar(static_cast<std::uint32_t>(p.vectors.cols()));
  w.scalar(p.final_loss);
  w.scalar(static_cast<std::uint32_t>(p.steps));
  w.floats(p.vectors.data(), static_cast<std::size_t>(p.vectors.size()));
  return w.bytes();
}

SoftPrompt deserialize_soft_prompt(std::vector<char> bytes) {
  BinaryReader r(std::move(bytes));
  r.expect_magic(kPromptMagic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != kPromptFormatVersion) {
    throw Error(ErrorCode::kUnsupportedFormat, "soft prompt checkpoint version " + std::to_string(version));
  }
  SoftPrompt p;
  p.layer = r.scalar<std::int32_t>();
  const auto length = r.scalar<std::uint32_t>();
  p.trained_offset = static_cast<int>(r.scalar<std::uint32_t>());
  const auto width = r.scalar<std::uint32_t>();
  p.final_loss = r.scalar<double>();
  p.steps = static_cast<int>(r.scalar<std::uint32_t>());
  if (length == 0 || width == 0) throw Error(ErrorCode::kCorruptCheckpoint, "empty soft prompt");
  r.require(std::size_t{length} * width * sizeof(float));
  p.vectors.resize(length, width);
  r.floats(p.vectors.data(), static_cast<std::size_t>(p.vectors.size()));
  r.expect_end();
  return p;
}

void save_soft_prompt(const SoftPrompt& prompt, const std::string& path) {
  write_file(path, serialize_soft_prompt(prompt));
}

SoftPrompt load_soft_prompt(const std::string& path) { return deserialize_soft_prompt(read_file(path)); }

}  // namespace flns
