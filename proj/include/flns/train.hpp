#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "flns/model.hpp"

namespace flns {

struct TrainConfig {
  int steps = 1000;
  int batch_size = 8;
  double learning_rate = 3e-3;
  int warmup_steps = 50;
  double min_lr_ratio = 0.1;  // cosine decay floor, relative to learning_rate
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  TransformerModel model;
  std::vector<double> losses;  // mean batch loss per step
};

// Next-token training on whole documents (documents longer than max_seq_len
// contribute a random window). Batches are drawn with the seeded RNG and the
// per-document gradients are summed in batch order, so the result is a pure
// function of (corpus, config, train config).
TrainResult train_toy_model(const std::vector<std::vector<TokenId>>& corpus, const ModelConfig& config,
                            const Tokenizer& tokenizer, const TrainConfig& train,
                            const std::function<void(int, double)>& on_step = {});

// Fraction of positions with mask[d][t] set whose argmax prediction equals
// documents[d][t+1].
double next_token_accuracy(const TransformerModel& model, const std::vector<std::vector<TokenId>>& documents,
                           const std::vector<std::vector<bool>>& mask);

}  // namespace flns
