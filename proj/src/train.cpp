#include "flns/train.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "flns/distribution.hpp"
#include "flns/errors.hpp"
#include "flns/optim.hpp"

namespace flns {

namespace {

double scheduled_lr(const TrainConfig& cfg, int step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.learning_rate * static_cast<double>(step + 1) / cfg.warmup_steps;
  }
  const int decay_steps = std::max(1, cfg.steps - cfg.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / decay_steps);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.learning_rate * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

}  // namespace

TrainResult train_toy_model(const std::vector<std::vector<TokenId>>& corpus, const ModelConfig& config,
                            const Tokenizer& tokenizer, const TrainConfig& train,
                            const std::function<void(int, double)>& on_step) {
  if (train.batch_size < 1 || train.steps < 0) throw Error(ErrorCode::kInvalidConfig, "bad train config");
  std::vector<const std::vector<TokenId>*> usable;
  for (const auto& doc : corpus) {
    if (doc.size() >= 2) usable.push_back(&doc);
  }
  if (usable.size() < static_cast<std::size_t>(train.batch_size)) {
    throw Error(ErrorCode::kInsufficientData, "corpus has " + std::to_string(usable.size()) +
                                                  " usable documents, batch needs " +
                                                  std::to_string(train.batch_size));
  }

  TrainResult result{init_model(config, tokenizer), {}};
  auto& weights = result.model.weights;
  std::vector<Matrix<float>*> params;
  weights.visit([&](const std::string&, Matrix<float>& m) { params.push_back(&m); });

  Weights<float> grads = Weights<float>::zeros(config);
  std::vector<Matrix<float>*> grad_ptrs;
  grads.visit([&](const std::string&, Matrix<float>& m) { grad_ptrs.push_back(&m); });
  std::vector<const Matrix<float>*> grad_cptrs(grad_ptrs.begin(), grad_ptrs.end());

  Adam adam;
  std::mt19937_64 rng(train.seed);
  std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
  const auto window = static_cast<std::size_t>(config.max_seq_len);
  const auto net = result.model.network();

  for (int step = 0; step < train.steps; ++step) {
    for (auto* g : grad_ptrs) g->setZero();
    double loss = 0.0;
    for (int b = 0; b < train.batch_size; ++b) {
      const auto& doc = *usable[pick(rng)];
      std::span<const TokenId> seq(doc);
      if (seq.size() > window) {
        std::uniform_int_distribution<std::size_t> start(0, seq.size() - window);
        seq = seq.subspan(start(rng), window);
      }
      loss += net.lm_loss_and_gradient(seq, grads);
    }
    loss /= train.batch_size;
    if (!std::isfinite(loss)) {
      throw Error(ErrorCode::kTrainingDiverged, "loss became non-finite at step " + std::to_string(step));
    }
    const float inv = 1.0f / static_cast<float>(train.batch_size);
    for (auto* g : grad_ptrs) *g *= inv;
    if (train.clip_norm > 0.0) clip_global_norm(grad_ptrs, train.clip_norm);
    adam.step(params, grad_cptrs, scheduled_lr(train, step));
    result.losses.push_back(loss);
    if (on_step) on_step(step, loss);
  }
  return result;
}

double next_token_accuracy(const TransformerModel& model, const std::vector<std::vector<TokenId>>& documents,
                           const std::vector<std::vector<bool>>& mask) {
  std::size_t total = 0, correct = 0;
  const auto net = model.network();
  const auto window = static_cast<std::size_t>(model.config.max_seq_len);
  for (std::size_t d = 0; d < documents.size(); ++d) {
    const auto& doc = documents[d];
    const std::size_t n = std::min(doc.size(), window);
    if (n < 2) continue;
    const auto trace = net.forward({.tokens = std::span<const TokenId>(doc).first(n)});
    for (std::size_t t = 0; t + 1 < n; ++t) {
      if (!mask[d][t]) continue;
      const auto row = trace.dists.row(static_cast<Eigen::Index>(t));
      const TokenId pred = argmax(std::span<const float>(row.data(), static_cast<std::size_t>(row.size())));
      ++total;
      if (pred == doc[t + 1]) ++correct;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace flns
