#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flns/model.hpp"
#include "flns/sample.hpp"

namespace flns {

enum class ProbeKind : std::uint32_t { kDirectVocab = 0, kHiddenState = 1 };

std::string probe_kind_name(ProbeKind kind);  // "vocab" / "hidden"
ProbeKind parse_probe_kind(std::string_view name);

// Affine map from a layer-`source_layer` state to either vocabulary logits
// (DirectVocab, weight d_model x d_vocab) or a final-layer state
// (HiddenState, weight d_model x d_model). Stored as h * weight + bias.
struct LinearProbe {
  ProbeKind kind = ProbeKind::kDirectVocab;
  int source_layer = 0;
  int offset = 0;
  Matrix<float> weight;
  Matrix<float> bias;  // 1 x out

  Eigen::Index input_dim() const { return weight.rows(); }
  Eigen::Index output_dim() const { return weight.cols(); }
};

struct ProbeEntry {
  RowVector<float> input;          // h_T^l
  RowVector<float> target_dist;    // y_{T+N}
  RowVector<float> target_hidden;  // h_{T+N}^L
};

struct ProbeDataset {
  int source_layer = 0;
  int offset = 0;
  std::vector<ProbeEntry> entries;
};

ProbeDataset build_probe_dataset(const TransformerModel& model, std::span<const EvalSample> samples, int layer,
                                 int offset);

struct ProbeTrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 64;
  int epochs = 20;
  double validation_fraction = 0.1;
  int patience = 3;  // epochs without validation improvement before stopping
  std::uint64_t seed = 0;
};

struct ProbeTrainResult {
  LinearProbe probe;
  std::vector<double> train_losses;       // per optimizer step
  std::vector<double> validation_losses;  // per epoch
  int epochs_run = 0;
};

// DirectVocab: zero init, soft-target cross-entropy against y_{T+N}.
// HiddenState: identity init, mean squared error against h_{T+N}^L.
// Returns the parameters with the lowest validation loss.
ProbeTrainResult train_linear_probe(const ProbeDataset& dataset, ProbeKind kind, const ProbeTrainConfig& config);

LinearProbe initial_probe(ProbeKind kind, int layer, int offset, int d_model, int d_vocab);

// DirectVocab: softmax(g(h)); HiddenState: softmax(D(final_norm(f(h)))).
RowVector<float> probe_predict(const LinearProbe& probe, const RowVector<float>& h, const TransformerModel& model);

// "FLNSPROB", u32 version, u32 kind, i32 source_layer, u32 offset, u32 rows,
// u32 cols, weight (rows x cols f32), bias (cols f32).
inline constexpr std::uint32_t kProbeFormatVersion = 1;
void save_probe(const LinearProbe& probe, const std::string& path);
LinearProbe load_probe(const std::string& path);
std::vector<char> serialize_probe(const LinearProbe& probe);
LinearProbe deserialize_probe(std::vector<char> bytes);

}  // namespace flns
