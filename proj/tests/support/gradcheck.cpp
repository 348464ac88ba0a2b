#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "flns/distribution.hpp"

namespace flns::testing {

namespace {

constexpr double kStep = 1e-3;
// Below this magnitude a gradient is compared absolutely; relative error of
// two numbers that are both rounding noise is meaningless.
constexpr double kNoiseFloor = 1e-7;

void record(GradientCheck& out, double analytic, double numeric, double tolerance) {
  const double abs_err = std::abs(analytic - numeric);
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kNoiseFloor});
  const double rel = abs_err / scale;
  out.max_absolute_error = std::max(out.max_absolute_error, abs_err);
  out.max_relative_error = std::max(out.max_relative_error, rel);
  if (rel > tolerance) ++out.failures;
  ++out.coordinates;
}

}  // namespace

GradientCheck check_override_gradient(const TransformerModel& model, std::size_t prompt_length, std::size_t forced,
                                      int layer, std::size_t coordinates, double tolerance, std::uint64_t seed) {
  const Weights<double> weights = model.weights.cast<double>();
  const Network<double> net(model.config, weights);
  const auto d = static_cast<Eigen::Index>(model.config.d_model);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.3);
  std::uniform_int_distribution<TokenId> pick_token(0, model.config.d_vocab - 1);

  std::vector<TokenId> tokens(prompt_length + forced, 0);
  for (std::size_t i = prompt_length; i < tokens.size(); ++i) tokens[i] = pick_token(rng);
  std::vector<EmbeddingOverride<double>> overrides(prompt_length);
  for (std::size_t p = 0; p < prompt_length; ++p) {
    overrides[p].position = p;
    overrides[p].vector = RowVector<double>(d);
    for (Eigen::Index j = 0; j < d; ++j) overrides[p].vector[j] = normal(rng);
  }
  PatchSpec<double> patch{layer, prompt_length - 1, RowVector<double>(d)};
  for (Eigen::Index j = 0; j < d; ++j) patch.vector[j] = normal(rng);
  const PatchSpec<double>* patch_ptr = layer >= 1 ? &patch : nullptr;

  std::vector<double> logits(static_cast<std::size_t>(model.config.d_vocab));
  for (auto& z : logits) z = 2.0 * normal(rng);
  const std::vector<double> target = softmax(logits);
  const std::size_t readout = tokens.size() - 1;

  auto loss_of = [&](const std::vector<EmbeddingOverride<double>>& ov) {
    const Trace<double> t = net.forward({.tokens = tokens, .overrides = ov, .patch = patch_ptr});
    const RowVector<double> p = t.dists.row(static_cast<Eigen::Index>(readout));
    return kl_divergence(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())),
                         std::span<const double>(target));
  };

  const OverrideGradient<double> analytic =
      net.kl_gradient({.tokens = tokens, .overrides = overrides, .patch = patch_ptr}, readout, target);

  GradientCheck out;
  std::uniform_int_distribution<std::size_t> pick_pos(0, prompt_length - 1);
  std::uniform_int_distribution<Eigen::Index> pick_dim(0, d - 1);
  auto perturbed = overrides;
  for (std::size_t c = 0; c < coordinates; ++c) {
    const std::size_t p = pick_pos(rng);
    const Eigen::Index j = pick_dim(rng);
    const double x = overrides[p].vector[j];
    perturbed[p].vector[j] = x + kStep;
    const double up = loss_of(perturbed);
    perturbed[p].vector[j] = x - kStep;
    const double down = loss_of(perturbed);
    perturbed[p].vector[j] = x;
    record(out, analytic.gradients[p][j], (up - down) / (2.0 * kStep), tolerance);
  }
  return out;
}

GradientCheck check_parameter_gradient(const TransformerModel& model, std::size_t length, std::size_t coordinates,
                                       double tolerance, std::uint64_t seed) {
  Weights<double> weights = model.weights.cast<double>();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> pick_token(0, model.config.d_vocab - 1);
  std::vector<TokenId> tokens(length);
  for (auto& t : tokens) t = pick_token(rng);

  Weights<double> grads = Weights<double>::zeros(model.config);
  Network<double>(model.config, weights).lm_loss_and_gradient(tokens, grads);

  std::vector<Matrix<double>*> params;
  std::vector<const Matrix<double>*> grad_list;
  weights.visit([&](const std::string&, Matrix<double>& m) { params.push_back(&m); });
  grads.visit([&](const std::string&, const Matrix<double>& m) { grad_list.push_back(&m); });

  GradientCheck out;
  std::uniform_int_distribution<std::size_t> pick_tensor(0, params.size() - 1);
  Weights<double> scratch_grads = Weights<double>::zeros(model.config);
  auto loss = [&] { return Network<double>(model.config, weights).lm_loss_and_gradient(tokens, scratch_grads); };
  for (std::size_t c = 0; c < coordinates; ++c) {
    const std::size_t t = pick_tensor(rng);
    Matrix<double>& m = *params[t];
    std::uniform_int_distribution<Eigen::Index> pick_entry(0, m.size() - 1);
    const Eigen::Index e = pick_entry(rng);
    const double x = m.data()[e];
    m.data()[e] = x + kStep;
    const double up = loss();
    m.data()[e] = x - kStep;
    const double down = loss();
    m.data()[e] = x;
    record(out, grad_list[t]->data()[e], (up - down) / (2.0 * kStep), tolerance);
  }
  return out;
}

}  // namespace flns::testing
