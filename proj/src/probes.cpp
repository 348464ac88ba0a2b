#include "flns/probes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "flns/binary_io.hpp"
#include "flns/errors.hpp"
#include "flns/optim.hpp"

namespace flns {

namespace {

constexpr std::string_view kProbeMagic = "FLNSPROB";

struct Batch {
  Matrix<float> inputs;
  Matrix<float> targets;
};

Batch gather(const ProbeDataset& ds, ProbeKind kind, std::span<const std::size_t> idx) {
  const auto& first = ds.entries.front();
  const Eigen::Index out = kind == ProbeKind::kDirectVocab ? first.target_dist.size() : first.target_hidden.size();
  Batch b{Matrix<float>(static_cast<Eigen::Index>(idx.size()), first.input.size()),
          Matrix<float>(static_cast<Eigen::Index>(idx.size()), out)};
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& e = ds.entries[idx[r]];
    b.inputs.row(static_cast<Eigen::Index>(r)) = e.input;
    b.targets.row(static_cast<Eigen::Index>(r)) =
        kind == ProbeKind::kDirectVocab ? e.target_dist : e.target_hidden;
  }
  return b;
}

// Mean loss over the batch; fills d(loss)/d(outputs) when `d_out` is non-null.
double batch_loss(ProbeKind kind, const Matrix<float>& outputs, const Matrix<float>& targets,
                  Matrix<float>* d_out) {
  const auto n = static_cast<double>(outputs.rows());
  double loss = 0.0;
  if (kind == ProbeKind::kDirectVocab) {
    Matrix<float> probs = outputs;
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      const float mx = probs.row(r).maxCoeff();
      probs.row(r) = (probs.row(r).array() - mx).exp();
      const double sum = probs.row(r).template cast<double>().sum();
      probs.row(r) /= static_cast<float>(sum);
      const double log_sum = std::log(sum) + mx;
      for (Eigen::Index c = 0; c < probs.cols(); ++c) {
        const double y = targets(r, c);
        if (y > 0.0) loss -= y * (static_cast<double>(outputs(r, c)) - log_sum);
      }
    }
    if (d_out) *d_out = (probs - targets) / static_cast<float>(n);
    return loss / n;
  }
  const Matrix<float> diff = outputs - targets;
  loss = diff.template cast<double>().squaredNorm() / (n * static_cast<double>(outputs.cols()));
  if (d_out) *d_out = diff * static_cast<float>(2.0 / (n * static_cast<double>(outputs.cols())));
  return loss;
}

Matrix<float> apply(const LinearProbe& p, const Matrix<float>& x) {
  Matrix<float> out = x * p.weight;
  out.rowwise() += p.bias.row(0);
  return out;
}

double dataset_loss(const ProbeDataset& ds, const LinearProbe& p, std::span<const std::size_t> idx) {
  if (idx.empty()) return 0.0;
  const Batch b = gather(ds, p.kind, idx);
  return batch_loss(p.kind, apply(p, b.inputs), b.targets, nullptr);
}

}  // namespace

std::string probe_kind_name(ProbeKind kind) { return kind == ProbeKind::kDirectVocab ? "vocab" : "hidden"; }

ProbeKind parse_probe_kind(std::string_view name) {
  if (name == "vocab") return ProbeKind::kDirectVocab;
  if (name == "hidden") return ProbeKind::kHiddenState;
  throw Error(ErrorCode::kInvalidConfig, "unknown probe kind '" + std::string(name) + "'");
}

ProbeDataset build_probe_dataset(const TransformerModel& model, std::span<const EvalSample> samples, int layer,
                                 int offset) {
  if (layer < 0 || layer > model.config.n_layers) {
    throw Error(ErrorCode::kRangeError, "probe source layer " + std::to_string(layer));
  }
  if (offset < 0) throw Error(ErrorCode::kRangeError, "negative probe offset");
  ProbeDataset ds{layer, offset, {}};
  ds.entries.reserve(samples.size());
  const auto n = static_cast<std::size_t>(offset);
  for (const auto& s : samples) {
    if (s.continuation.size() < n + 1 || s.ref_dists.size() < n + 1 || s.final_hidden.size() < n + 1) {
      throw Error(ErrorCode::kSampleTooShort, "sample " + std::to_string(s.id) + " does not cover offset " +
                                                  std::to_string(offset));
    }
    if (s.hidden_cache.size() != static_cast<std::size_t>(model.config.n_layers) + 1) {
      throw Error(ErrorCode::kDimensionError, "sample hidden cache does not match model depth");
    }
    ds.entries.push_back({s.hidden_cache[static_cast<std::size_t>(layer)], s.ref_dists[n], s.final_hidden[n]});
  }
  return ds;
}

LinearProbe initial_probe(ProbeKind kind, int layer, int offset, int d_model, int d_vocab) {
  LinearProbe p{kind, layer, offset, {}, {}};
  if (kind == ProbeKind::kDirectVocab) {
    p.weight = Matrix<float>::Zero(d_model, d_vocab);
    p.bias = Matrix<float>::Zero(1, d_vocab);
  } else {
    p.weight = Matrix<float>::Identity(d_model, d_model);
    p.bias = Matrix<float>::Zero(1, d_model);
  }
  return p;
}

ProbeTrainResult train_linear_probe(const ProbeDataset& dataset, ProbeKind kind, const ProbeTrainConfig& config) {
  if (dataset.entries.empty()) throw Error(ErrorCode::kInsufficientData, "empty probe dataset");
  if (config.batch_size < 1 || config.epochs < 0) throw Error(ErrorCode::kInvalidConfig, "bad probe train config");
  const auto& first = dataset.entries.front();
  ProbeTrainResult result;
  result.probe = initial_probe(kind, dataset.source_layer, dataset.offset, static_cast<int>(first.input.size()),
                               static_cast<int>(first.target_dist.size()));

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(dataset.entries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = order.size() >= 2
                          ? std::max<std::size_t>(1, static_cast<std::size_t>(config.validation_fraction *
                                                                              static_cast<double>(order.size())))
                          : 0;
  if (config.validation_fraction <= 0.0) n_val = 0;
  std::vector<std::size_t> val(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
  const auto& monitor = val.empty() ? train : val;

  LinearProbe& probe = result.probe;
  LinearProbe best = probe;
  double best_loss = dataset_loss(dataset, probe, monitor);
  int stale = 0;
  Adam adam({.learning_rate = config.learning_rate});
  std::array<Matrix<float>*, 2> params{&probe.weight, &probe.bias};
  Matrix<float> d_weight, d_bias;
  std::array<const Matrix<float>*, 2> grads{&d_weight, &d_bias};

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(train.size(), start + static_cast<std::size_t>(config.batch_size));
      const Batch b = gather(dataset, kind, std::span<const std::size_t>(train).subspan(start, end - start));
      Matrix<float> d_out;
      const double loss = batch_loss(kind, apply(probe, b.inputs), b.targets, &d_out);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::kTrainingDiverged, "probe loss became non-finite in epoch " + std::to_string(epoch));
      }
      d_weight = b.inputs.transpose() * d_out;
      d_bias = d_out.colwise().sum();
      adam.step(params, grads);
      result.train_losses.push_back(loss);
    }
    const double v = dataset_loss(dataset, probe, monitor);
    if (!std::isfinite(v)) throw Error(ErrorCode::kTrainingDiverged, "probe validation loss is non-finite");
    result.validation_losses.push_back(v);
    result.epochs_run = epoch + 1;
    if (v < best_loss) {
      best_loss = v;
      best = probe;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  probe = std::move(best);
  return result;
}

RowVector<float> probe_predict(const LinearProbe& probe, const RowVector<float>& h, const TransformerModel& model) {
  if (h.size() != probe.input_dim()) {
    throw Error(ErrorCode::kDimensionError, "probe expects " + std::to_string(probe.input_dim()) +
                                                " inputs, got " + std::to_string(h.size()));
  }
  RowVector<float> out = h * probe.weight + probe.bias.row(0);
  if (probe.kind == ProbeKind::kHiddenState) return model.network().decode(out, true);
  const float mx = out.maxCoeff();
  out = (out.array() - mx).exp();
  out /= out.sum();
  return out;
}

std::vector<char> serialize_probe(const LinearProbe& probe) {
  BinaryWriter w;
  w.magic(kProbeMagic);
  w.scalar(kProbeFormatVersion);
  w.scalar(static_cast<std::uint32_t>(probe.kind));
  w.scalar(static_cast<std::int32_t>(probe.source_layer));
  w.scalar(static_cast<std::uint32_t>(probe.offset));
  w.scalar(static_cast<std::uint32_t>(probe.weight.rows()));
  w.scalar(static_cast<std::uint32_t>(probe.weight.cols()));
  w.floats(probe.weight.data(), static_cast<std::size_t>(probe.weight.size()));
  w.floats(probe.bias.data(), static_cast<std::size_t>(probe.bias.size()));
  return w.bytes();
}

LinearProbe deserialize_probe(std::vector<char> bytes) {
  BinaryReader r(std::move(bytes));
  r.expect_magic(kProbeMagic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != kProbeFormatVersion) {
    throw Error(ErrorCode::kUnsupportedFormat, "probe checkpoint version " + std::to_string(version));
  }
  LinearProbe p;
  const auto kind = r.scalar<std::uint32_t>();
  if (kind > 1) throw Error(ErrorCode::kCorruptCheckpoint, "unknown probe kind");
  p.kind = static_cast<ProbeKind>(kind);
  p.source_layer = r.scalar<std::int32_t>();
  p.offset = static_cast<int>(r.scalar<std::uint32_t>());
  const auto rows = r.scalar<std::uint32_t>();
  const auto cols = r.scalar<std::uint32_t>();
  if (rows == 0 || cols == 0 || (p.kind == ProbeKind::kHiddenState && rows != cols)) {
    throw Error(ErrorCode::kCorruptCheckpoint, "probe shape is inconsistent with its kind");
  }
  r.require((std::size_t{rows} + 1) * cols * sizeof(float));
  p.weight.resize(rows, cols);
  p.bias.resize(1, cols);
  r.floats(p.weight.data(), static_cast<std::size_t>(p.weight.size()));
  r.floats(p.bias.data(), static_cast<std::size_t>(p.bias.size()));
  r.expect_end();
  return p;
}

void save_probe(const LinearProbe& probe, const std::string& path) { write_file(path, serialize_probe(probe)); }

LinearProbe load_probe(const std::string& path) { return deserialize_probe(read_file(path)); }

}  // namespace flns
