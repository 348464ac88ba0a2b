#include <gtest/gtest.h>

#include "flns/distribution.hpp"
#include "flns/errors.hpp"
#include "flns/model.hpp"
#include "support/gradcheck.hpp"
#include "support/toy.hpp"

using namespace flns;
using flns::testing::check_override_gradient;
using flns::testing::check_parameter_gradient;
using flns::testing::error_code_of;
using flns::testing::random_model;

namespace {

void expect_clean(const flns::testing::GradientCheck& c, std::size_t coordinates) {
  EXPECT_EQ(c.coordinates, coordinates);
  EXPECT_EQ(c.failures, 0u) << "max relative error " << c.max_relative_error;
  EXPECT_LE(c.max_relative_error, 1e-3);
}

}  // namespace

TEST(Gradient, OverridesMatchCentralDifferencesWithPatch) {
  const auto model = random_model(2, 32, 4, 24, 32);
  expect_clean(check_override_gradient(model, 4, 2, 1, 120, 1e-3, 11), 120);
}

TEST(Gradient, OverridesMatchCentralDifferencesWithPatchAtLastLayer) {
  const auto model = random_model(2, 32, 4, 24, 32);
  expect_clean(check_override_gradient(model, 3, 1, 2, 100, 1e-3, 12), 100);
}

TEST(Gradient, OverridesMatchCentralDifferencesWithoutPatch) {
  const auto model = random_model(2, 32, 4, 24, 32);
  expect_clean(check_override_gradient(model, 3, 2, 0, 100, 1e-3, 13), 100);
}

TEST(Gradient, OverridesMatchCentralDifferencesUnderRotary) {
  const auto model = random_model(2, 32, 4, 24, 32, PositionalScheme::kRotary);
  expect_clean(check_override_gradient(model, 4, 2, 1, 100, 1e-3, 14), 100);
}

TEST(Gradient, ParametersMatchCentralDifferences) {
  const auto model = random_model(2, 32, 4, 24, 32);
  expect_clean(check_parameter_gradient(model, 12, 150, 1e-3, 15), 150);
  const auto rotary = random_model(2, 32, 4, 24, 32, PositionalScheme::kRotary);
  expect_clean(check_parameter_gradient(rotary, 12, 100, 1e-3, 16), 100);
}

TEST(Gradient, KlOfMatchingTargetIsZeroWithZeroGradient) {
  const auto model = random_model(2, 32, 4, 24, 32);
  const std::vector<TokenId> tokens{0, 0, 5};
  std::vector<EmbeddingOverride<float>> overrides{{0, RowVector<float>::Constant(32, 0.1f)},
                                                   {1, RowVector<float>::Constant(32, -0.2f)}};
  const auto trace = forward_with_embedding_overrides(model, tokens, overrides);
  std::vector<double> target(24);
  double sum = 0.0;
  for (int j = 0; j < 24; ++j) sum += target[j] = trace.dists(2, j);
  for (auto& t : target) t /= sum;
  const auto g = loss_gradient_wrt_overrides(model, tokens, overrides, nullptr, 2, target);
  // Float forward pass against a target renormalized in double.
  EXPECT_NEAR(g.loss, 0.0, 1e-6);
  for (const auto& row : g.gradients) EXPECT_LE(row.cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Gradient, FloatPathAgreesWithDoublePath) {
  const auto model = random_model(2, 32, 4, 24, 32);
  const std::vector<TokenId> tokens{0, 0, 0, 7, 9};
  std::vector<EmbeddingOverride<float>> overrides;
  for (std::size_t p = 0; p < 3; ++p) overrides.push_back({p, RowVector<float>::Constant(32, 0.05f * (p + 1))});
  const PatchSpec<float> patch{1, 2, RowVector<float>::Constant(32, 0.3f)};
  std::vector<double> target(24, 1.0 / 24);
  const auto f = loss_gradient_wrt_overrides(model, tokens, overrides, &patch, 4, target);

  const auto weights = model.weights.cast<double>();
  const Network<double> net(model.config, weights);
  std::vector<EmbeddingOverride<double>> od;
  for (const auto& o : overrides) od.push_back({o.position, o.vector.cast<double>()});
  const PatchSpec<double> pd{1, 2, patch.vector.cast<double>()};
  const auto d = net.kl_gradient({.tokens = tokens, .overrides = od, .patch = &pd}, 4, target);
  EXPECT_NEAR(f.loss, d.loss, 1e-5);
  for (std::size_t p = 0; p < 3; ++p) {
    const double scale = d.gradients[p].norm() + 1e-12;
    EXPECT_LE((f.gradients[p].cast<double>() - d.gradients[p]).norm() / scale, 1e-3);
  }
}

TEST(Gradient, TargetAndReadoutValidation) {
  const auto model = random_model(1, 16, 2, 10, 8);
  const std::vector<TokenId> tokens{0, 1};
  const std::vector<EmbeddingOverride<float>> overrides{{0, RowVector<float>::Zero(16)}};
  const std::vector<double> bad(10, 0.5);
  const std::vector<double> good(10, 0.1);
  const std::vector<double> short_target(3, 1.0 / 3);
  EXPECT_EQ(error_code_of([&] { loss_gradient_wrt_overrides(model, tokens, overrides, nullptr, 1, bad); }),
            ErrorCode::kInvalidTarget);
  EXPECT_EQ(error_code_of([&] { loss_gradient_wrt_overrides(model, tokens, overrides, nullptr, 1, short_target); }),
            ErrorCode::kInvalidTarget);
  EXPECT_EQ(error_code_of([&] { loss_gradient_wrt_overrides(model, tokens, overrides, nullptr, 2, good); }),
            ErrorCode::kRangeError);
}
