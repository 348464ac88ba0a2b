#include <cmath>
#include <cstring>
#include <numbers>

#include "flns/distribution.hpp"
#include "flns/errors.hpp"
#include "flns/model.hpp"

namespace flns {

namespace {

using Eigen::Index;

constexpr double kNormEps = 1e-5;
constexpr double kRotaryBase = 10000.0;

template <typename S>
void layer_norm(const Matrix<S>& x, const Matrix<S>& gain, const Matrix<S>& bias, Matrix<S>& hat,
                std::vector<S>& rstd, Matrix<S>& out) {
  const Index rows = x.rows();
  hat.resize(rows, x.cols());
  rstd.resize(static_cast<std::size_t>(rows));
  for (Index t = 0; t < rows; ++t) {
    const S mean = x.row(t).mean();
    auto centered = (x.row(t).array() - mean).eval();
    const S var = centered.square().mean();
    const S r = S(1) / std::sqrt(var + S(kNormEps));
    hat.row(t) = centered * r;
    rstd[static_cast<std::size_t>(t)] = r;
  }
  out = (hat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

template <typename S>
Matrix<S> layer_norm_backward(const Matrix<S>& d_out, const Matrix<S>& hat, const std::vector<S>& rstd,
                              const Matrix<S>& gain, Matrix<S>* d_gain, Matrix<S>* d_bias) {
  if (d_gain) {
    d_gain->row(0) += (d_out.array() * hat.array()).colwise().sum().matrix();
    d_bias->row(0) += d_out.colwise().sum();
  }
  Matrix<S> d_hat = (d_out.array().rowwise() * gain.row(0).array()).matrix();
  Matrix<S> dx(d_out.rows(), d_out.cols());
  for (Index t = 0; t < d_out.rows(); ++t) {
    const S m1 = d_hat.row(t).mean();
    const S m2 = (d_hat.row(t).array() * hat.row(t).array()).mean();
    dx.row(t) = rstd[static_cast<std::size_t>(t)] *
                (d_hat.row(t).array() - m1 - hat.row(t).array() * m2);
  }
  return dx;
}

// tanh approximation
template <typename S>
S gelu(S x) {
  const S c = std::sqrt(S(2) / std::numbers::pi_v<S>);
  return S(0.5) * x * (S(1) + std::tanh(c * (x + S(0.044715) * x * x * x)));
}

template <typename S>
S gelu_grad(S x) {
  const S c = std::sqrt(S(2) / std::numbers::pi_v<S>);
  const S th = std::tanh(c * (x + S(0.044715) * x * x * x));
  return S(0.5) * (S(1) + th) +
         S(0.5) * x * (S(1) - th * th) * c * (S(1) + S(3) * S(0.044715) * x * x);
}

template <typename S>
void softmax_rows(Matrix<S>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    const S mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

// Rotates each (2i, 2i+1) pair of every head by pos * base^(-2i/head_dim).
// `inverse` applies the transpose rotation (used by the reverse pass).
template <typename S>
void apply_rotary(Matrix<S>& x, int n_heads, int head_dim, bool inverse) {
  const int half = head_dim / 2;
  for (Index t = 0; t < x.rows(); ++t) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(kRotaryBase, -2.0 * i / head_dim);
      const double angle = static_cast<double>(t) * freq;
      const S c = static_cast<S>(std::cos(angle));
      const S s = static_cast<S>(inverse ? -std::sin(angle) : std::sin(angle));
      for (int h = 0; h < n_heads; ++h) {
        const Index a = h * head_dim + 2 * i;
        const S x0 = x(t, a);
        const S x1 = x(t, a + 1);
        x(t, a) = x0 * c - x1 * s;
        x(t, a + 1) = x0 * s + x1 * c;
      }
    }
  }
}

template <typename S>
Matrix<S> block_forward(const ModelConfig& cfg, const BlockWeights<S>& w, const Matrix<S>& x,
                        BlockCache<S>& c) {
  const Index T = x.rows();
  const Index D = cfg.d_model;
  const int H = cfg.n_heads;
  const int hd = cfg.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));

  layer_norm(x, w.ln1_gain, w.ln1_bias, c.ln1_hat, c.ln1_rstd, c.ln1_out);
  Matrix<S> qkv = c.ln1_out * w.qkv_weight;
  qkv.rowwise() += w.qkv_bias.row(0);
  c.q = qkv.leftCols(D);
  c.k = qkv.middleCols(D, D);
  c.v = qkv.rightCols(D);
  if (cfg.positional == PositionalScheme::kRotary) {
    apply_rotary(c.q, H, hd, false);
    apply_rotary(c.k, H, hd, false);
  }

  c.probs.resize(static_cast<std::size_t>(H));
  c.context.resize(T, D);
  for (int h = 0; h < H; ++h) {
    Matrix<S> scores = (c.q.middleCols(h * hd, hd) * c.k.middleCols(h * hd, hd).transpose()) * scale;
    for (Index i = 0; i < T; ++i) {
      const S mx = scores.row(i).head(i + 1).maxCoeff();
      scores.row(i).head(i + 1) = (scores.row(i).head(i + 1).array() - mx).exp();
      scores.row(i).head(i + 1) /= scores.row(i).head(i + 1).sum();
      scores.row(i).tail(T - i - 1).setZero();
    }
    c.context.middleCols(h * hd, hd) = scores * c.v.middleCols(h * hd, hd);
    c.probs[static_cast<std::size_t>(h)] = std::move(scores);
  }

  Matrix<S> a = c.context * w.out_weight;
  a.rowwise() += w.out_bias.row(0);
  a += x;

  layer_norm(a, w.ln2_gain, w.ln2_bias, c.ln2_hat, c.ln2_rstd, c.ln2_out);
  c.fc_pre = c.ln2_out * w.fc_weight;
  c.fc_pre.rowwise() += w.fc_bias.row(0);
  c.fc_act = c.fc_pre.unaryExpr([](S v) { return gelu(v); });
  Matrix<S> out = c.fc_act * w.proj_weight;
  out.rowwise() += w.proj_bias.row(0);
  out += a;
  return out;
}

template <typename S>
Matrix<S> block_backward(const ModelConfig& cfg, const BlockWeights<S>& w, const BlockCache<S>& c,
                         const Matrix<S>& d_out, BlockWeights<S>* g) {
  const Index T = d_out.rows();
  const Index D = cfg.d_model;
  const int H = cfg.n_heads;
  const int hd = cfg.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));

  // feed-forward
  if (g) {
    g->proj_weight.noalias() += c.fc_act.transpose() * d_out;
    g->proj_bias.row(0) += d_out.colwise().sum();
  }
  Matrix<S> d_fc = d_out * w.proj_weight.transpose();
  d_fc.array() *= c.fc_pre.unaryExpr([](S v) { return gelu_grad(v); }).array();
  if (g) {
    g->fc_weight.noalias() += c.ln2_out.transpose() * d_fc;
    g->fc_bias.row(0) += d_fc.colwise().sum();
  }
  Matrix<S> d_ln2 = d_fc * w.fc_weight.transpose();
  Matrix<S> d_a = d_out + layer_norm_backward(d_ln2, c.ln2_hat, c.ln2_rstd, w.ln2_gain,
                                              g ? &g->ln2_gain : nullptr, g ? &g->ln2_bias : nullptr);

  // attention
  if (g) {
    g->out_weight.noalias() += c.context.transpose() * d_a;
    g->out_bias.row(0) += d_a.colwise().sum();
  }
  Matrix<S> d_ctx = d_a * w.out_weight.transpose();
  Matrix<S> dq(T, D), dk(T, D), dv(T, D);
  for (int h = 0; h < H; ++h) {
    const auto& p = c.probs[static_cast<std::size_t>(h)];
    auto dctx_h = d_ctx.middleCols(h * hd, hd);
    Matrix<S> dp = dctx_h * c.v.middleCols(h * hd, hd).transpose();
    dv.middleCols(h * hd, hd) = p.transpose() * dctx_h;
    Matrix<S> ds(T, T);
    for (Index i = 0; i < T; ++i) {
      const S dot = (dp.row(i).array() * p.row(i).array()).sum();
      ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
    }
    ds *= scale;
    dq.middleCols(h * hd, hd) = ds * c.k.middleCols(h * hd, hd);
    dk.middleCols(h * hd, hd) = ds.transpose() * c.q.middleCols(h * hd, hd);
  }
  if (cfg.positional == PositionalScheme::kRotary) {
    apply_rotary(dq, H, hd, true);
    apply_rotary(dk, H, hd, true);
  }
  Matrix<S> d_qkv(T, 3 * D);
  d_qkv.leftCols(D) = dq;
  d_qkv.middleCols(D, D) = dk;
  d_qkv.rightCols(D) = dv;
  if (g) {
    g->qkv_weight.noalias() += c.ln1_out.transpose() * d_qkv;
    g->qkv_bias.row(0) += d_qkv.colwise().sum();
  }
  Matrix<S> d_ln1 = d_qkv * w.qkv_weight.transpose();
  return d_a + layer_norm_backward(d_ln1, c.ln1_hat, c.ln1_rstd, w.ln1_gain,
                                   g ? &g->ln1_gain : nullptr, g ? &g->ln1_bias : nullptr);
}

template <typename S>
bool all_finite(const RowVector<S>& v) {
  return v.array().isFinite().all();
}

}  // namespace

template <typename S>
Network<S>::Network(const ModelConfig& config, const Weights<S>& weights)
    : config_(config), weights_(weights) {}

template <typename S>
void Network<S>::validate(const ForwardInputs<S>& inputs) const {
  const std::size_t T = inputs.tokens.size();
  if (T == 0) throw Error(ErrorCode::kEmptyInput, "empty token sequence");
  if (T > static_cast<std::size_t>(config_.max_seq_len)) {
    throw Error(ErrorCode::kSequenceTooLong, "length " + std::to_string(T) + " exceeds max_seq_len " +
                                                 std::to_string(config_.max_seq_len));
  }
  for (std::size_t i = 0; i < T; ++i) {
    const TokenId id = inputs.tokens[i];
    if (id < 0 || id >= config_.d_vocab) {
      throw Error(ErrorCode::kRangeError,
                  "token id " + std::to_string(id) + " at position " + std::to_string(i));
    }
  }
  std::vector<bool> seen(T, false);
  for (const auto& o : inputs.overrides) {
    if (o.position >= T) {
      throw Error(ErrorCode::kPatchOutOfRange, "override position " + std::to_string(o.position));
    }
    if (seen[o.position]) {
      throw Error(ErrorCode::kOverrideConflict,
                  "duplicate override at position " + std::to_string(o.position));
    }
    seen[o.position] = true;
    if (o.vector.size() != config_.d_model) {
      throw Error(ErrorCode::kDimensionError, "override vector has size " + std::to_string(o.vector.size()));
    }
  }
  if (const auto* p = inputs.patch) {
    if (p->layer < 0 || p->layer > config_.n_layers || p->position >= T) {
      throw Error(ErrorCode::kPatchOutOfRange, "patch (layer " + std::to_string(p->layer) + ", position " +
                                                   std::to_string(p->position) + ")");
    }
    if (p->vector.size() != config_.d_model) {
      throw Error(ErrorCode::kDimensionError, "patch vector has size " + std::to_string(p->vector.size()));
    }
    if (!all_finite(p->vector)) throw Error(ErrorCode::kPatchOutOfRange, "patch vector is not finite");
    if (p->layer == 0 && seen[p->position]) {
      throw Error(ErrorCode::kOverrideConflict,
                  "override and layer-0 patch both target position " + std::to_string(p->position));
    }
  }
}

template <typename S>
Trace<S> Network<S>::forward(const ForwardInputs<S>& inputs, ForwardCache<S>* cache) const {
  validate(inputs);
  const Index T = static_cast<Index>(inputs.tokens.size());
  const auto& W = weights_;

  Trace<S> trace;
  trace.tokens.assign(inputs.tokens.begin(), inputs.tokens.end());
  trace.hidden.reserve(static_cast<std::size_t>(config_.n_layers) + 1);

  std::vector<bool> overridden(static_cast<std::size_t>(T), false);
  Matrix<S> h(T, config_.d_model);
  for (Index t = 0; t < T; ++t) h.row(t) = W.token_embedding.row(inputs.tokens[static_cast<std::size_t>(t)]);
  for (const auto& o : inputs.overrides) {
    h.row(static_cast<Index>(o.position)) = o.vector;
    overridden[o.position] = true;
  }
  if (config_.positional == PositionalScheme::kLearnedAbsolute) h += W.position_embedding.topRows(T);

  const auto apply_patch = [&](int layer, Matrix<S>& m) {
    if (inputs.patch && inputs.patch->layer == layer) {
      m.row(static_cast<Index>(inputs.patch->position)) = inputs.patch->vector;
    }
  };
  apply_patch(0, h);
  trace.hidden.push_back(h);

  ForwardCache<S> local;
  ForwardCache<S>& c = cache ? *cache : local;
  c.blocks.resize(static_cast<std::size_t>(config_.n_layers));
  for (int l = 0; l < config_.n_layers; ++l) {
    const auto i = static_cast<std::size_t>(l);
    h = block_forward(config_, W.blocks[i], h, c.blocks[i]);
    apply_patch(l + 1, h);
    trace.hidden.push_back(h);
  }
  layer_norm(h, W.final_gain, W.final_bias, c.final_hat, c.final_rstd, c.final_out);
  trace.logits = c.final_out * W.decoder;
  trace.dists = trace.logits;
  softmax_rows(trace.dists);

  if (cache) {
    c.tokens = trace.tokens;
    c.overridden = std::move(overridden);
    c.patch.reset();
    if (inputs.patch) c.patch = std::make_pair(inputs.patch->layer, inputs.patch->position);
  }
  return trace;
}

template <typename S>
void Network<S>::backward(const ForwardCache<S>& cache, const Matrix<S>& d_logits, Weights<S>* g,
                          Matrix<S>* d_embed) const {
  const auto& W = weights_;
  if (g) g->decoder.noalias() += cache.final_out.transpose() * d_logits;
  Matrix<S> d_final = d_logits * W.decoder.transpose();
  Matrix<S> dh = layer_norm_backward(d_final, cache.final_hat, cache.final_rstd, W.final_gain,
                                     g ? &g->final_gain : nullptr, g ? &g->final_bias : nullptr);
  const auto cut_patch = [&](int layer) {
    if (cache.patch && cache.patch->first == layer) dh.row(static_cast<Index>(cache.patch->second)).setZero();
  };
  cut_patch(config_.n_layers);
  for (int l = config_.n_layers - 1; l >= 0; --l) {
    const auto i = static_cast<std::size_t>(l);
    dh = block_backward(config_, W.blocks[i], cache.blocks[i], dh, g ? &g->blocks[i] : nullptr);
    cut_patch(l);
  }
  if (g) {
    for (Index t = 0; t < dh.rows(); ++t) {
      if (!cache.overridden[static_cast<std::size_t>(t)]) {
        g->token_embedding.row(cache.tokens[static_cast<std::size_t>(t)]) += dh.row(t);
      }
    }
    if (config_.positional == PositionalScheme::kLearnedAbsolute) {
      g->position_embedding.topRows(dh.rows()) += dh;
    }
  }
  if (d_embed) *d_embed = std::move(dh);
}

template <typename S>
OverrideGradient<S> Network<S>::kl_gradient(const ForwardInputs<S>& inputs, std::size_t readout,
                                            std::span<const double> target) const {
  if (target.size() != static_cast<std::size_t>(config_.d_vocab) || !is_distribution(target, 1e-4)) {
    throw Error(ErrorCode::kInvalidTarget, "target is not a probability vector over the vocabulary");
  }
  if (readout >= inputs.tokens.size()) {
    throw Error(ErrorCode::kRangeError, "readout position " + std::to_string(readout));
  }
  ForwardCache<S> cache;
  OverrideGradient<S> out;
  out.trace = forward(inputs, &cache);

  const auto V = static_cast<Index>(config_.d_vocab);
  const auto r = static_cast<Index>(readout);
  // KL(p || y) with p = softmax(z): dKL/dz_j = p_j (log p_j - log y_j - KL).
  std::vector<double> log_ratio(static_cast<std::size_t>(V));
  double kl = 0.0;
  for (Index j = 0; j < V; ++j) {
    const double p = static_cast<double>(out.trace.dists(r, j));
    const double lr = p > 0.0 ? std::log(p) - std::log(std::max(target[static_cast<std::size_t>(j)], 1e-30)) : 0.0;
    log_ratio[static_cast<std::size_t>(j)] = lr;
    kl += p * lr;
  }
  out.loss = std::max(kl, 0.0);
  Matrix<S> d_logits = Matrix<S>::Zero(out.trace.logits.rows(), V);
  for (Index j = 0; j < V; ++j) {
    const double p = static_cast<double>(out.trace.dists(r, j));
    d_logits(r, j) = static_cast<S>(p * (log_ratio[static_cast<std::size_t>(j)] - kl));
  }
  Matrix<S> d_embed;
  backward(cache, d_logits, nullptr, &d_embed);
  out.gradients.reserve(inputs.overrides.size());
  for (const auto& o : inputs.overrides) out.gradients.emplace_back(d_embed.row(static_cast<Index>(o.position)));
  return out;
}

template <typename S>
double Network<S>::lm_loss_and_gradient(std::span<const TokenId> tokens, Weights<S>& grads) const {
  if (tokens.size() < 2) throw Error(ErrorCode::kInsufficientData, "need at least two tokens");
  ForwardCache<S> cache;
  const Trace<S> trace = forward({.tokens = tokens}, &cache);
  const Index n = static_cast<Index>(tokens.size()) - 1;
  Matrix<S> d_logits = Matrix<S>::Zero(trace.logits.rows(), trace.logits.cols());
  double loss = 0.0;
  const S inv = S(1) / static_cast<S>(n);
  for (Index t = 0; t < n; ++t) {
    const TokenId next = tokens[static_cast<std::size_t>(t) + 1];
    loss -= std::log(std::max(static_cast<double>(trace.dists(t, next)), 1e-30));
    d_logits.row(t) = trace.dists.row(t) * inv;
    d_logits(t, next) -= inv;
  }
  backward(cache, d_logits, &grads, nullptr);
  return loss / static_cast<double>(n);
}

template <typename S>
RowVector<S> Network<S>::decode(const RowVector<S>& h, bool apply_final_norm) const {
  if (h.size() != config_.d_model) {
    throw Error(ErrorCode::kDimensionError, "state has size " + std::to_string(h.size()));
  }
  Matrix<S> x = h;
  if (apply_final_norm) {
    Matrix<S> hat, out;
    std::vector<S> rstd;
    layer_norm(x, weights_.final_gain, weights_.final_bias, hat, rstd, out);
    x = std::move(out);
  }
  Matrix<S> logits = x * weights_.decoder;
  softmax_rows(logits);
  return logits.row(0);
}

template class Network<float>;
template class Network<double>;

template <typename S>
Weights<S> Weights<S>::zeros(const ModelConfig& c) {
  const Index D = c.d_model;
  Weights<S> w;
  w.token_embedding = Matrix<S>::Zero(c.d_vocab, D);
  if (c.positional == PositionalScheme::kLearnedAbsolute) w.position_embedding = Matrix<S>::Zero(c.max_seq_len, D);
  w.blocks.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& b : w.blocks) {
    b.ln1_gain = Matrix<S>::Zero(1, D);
    b.ln1_bias = Matrix<S>::Zero(1, D);
    b.qkv_weight = Matrix<S>::Zero(D, 3 * D);
    b.qkv_bias = Matrix<S>::Zero(1, 3 * D);
    b.out_weight = Matrix<S>::Zero(D, D);
    b.out_bias = Matrix<S>::Zero(1, D);
    b.ln2_gain = Matrix<S>::Zero(1, D);
    b.ln2_bias = Matrix<S>::Zero(1, D);
    b.fc_weight = Matrix<S>::Zero(D, c.d_ff());
    b.fc_bias = Matrix<S>::Zero(1, c.d_ff());
    b.proj_weight = Matrix<S>::Zero(c.d_ff(), D);
    b.proj_bias = Matrix<S>::Zero(1, D);
  }
  w.final_gain = Matrix<S>::Zero(1, D);
  w.final_bias = Matrix<S>::Zero(1, D);
  w.decoder = Matrix<S>::Zero(D, c.d_vocab);
  return w;
}

template <typename S>
bool Weights<S>::operator==(const Weights& other) const {
  std::vector<const Matrix<S>*> mine, theirs;
  visit([&](const std::string&, const Matrix<S>& m) { mine.push_back(&m); });
  other.visit([&](const std::string&, const Matrix<S>& m) { theirs.push_back(&m); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i]->rows() != theirs[i]->rows() || mine[i]->cols() != theirs[i]->cols()) return false;
    if (std::memcmp(mine[i]->data(), theirs[i]->data(), sizeof(S) * static_cast<std::size_t>(mine[i]->size())) != 0) {
      return false;
    }
  }
  return true;
}

template struct Weights<float>;
template struct Weights<double>;

}  // namespace flns
