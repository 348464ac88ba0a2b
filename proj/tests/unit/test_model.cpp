#include <gtest/gtest.h>

#include <random>

#include "flns/errors.hpp"
#include "flns/model.hpp"
#include "flns/train.hpp"
#include "support/toy.hpp"

using namespace flns;
using flns::testing::error_code_of;
using flns::testing::max_abs_diff;
using flns::testing::random_model;
using flns::testing::row_span;
using flns::testing::top1;
using flns::testing::toy_world;

namespace {

std::vector<TokenId> random_tokens(std::size_t n, int d_vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> pick(0, d_vocab - 1);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = pick(rng);
  return out;
}

bool traces_equal(const Trace<float>& a, const Trace<float>& b) {
  if (a.hidden.size() != b.hidden.size()) return false;
  for (std::size_t l = 0; l < a.hidden.size(); ++l) {
    if (a.hidden[l] != b.hidden[l]) return false;
  }
  return a.logits == b.logits && a.dists == b.dists;
}

class ModelPerScheme : public ::testing::TestWithParam<PositionalScheme> {};

}  // namespace

TEST(ModelConfig, ValidateRejectsInconsistentShapes) {
  ModelConfig c{.n_layers = 2, .d_model = 30, .n_heads = 4, .d_vocab = 8, .max_seq_len = 16};
  EXPECT_EQ(error_code_of([&] { c.validate(); }), ErrorCode::kInvalidConfig);
  c.d_model = 32;
  EXPECT_NO_THROW(c.validate());
  c.d_vocab = 1;
  EXPECT_EQ(error_code_of([&] { c.validate(); }), ErrorCode::kInvalidConfig);
  c.d_vocab = 8;
  c.n_layers = 0;
  EXPECT_EQ(error_code_of([&] { c.validate(); }), ErrorCode::kInvalidConfig);
}

TEST(ModelConfig, JsonRoundTrip) {
  const ModelConfig c{.n_layers = 3, .d_model = 48, .n_heads = 6, .d_vocab = 50, .max_seq_len = 40,
                      .positional = PositionalScheme::kRotary, .seed = 99};
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
  EXPECT_EQ(error_code_of([] { parse_positional_scheme("sinusoidal"); }), ErrorCode::kInvalidConfig);
}

TEST_P(ModelPerScheme, DistributionsAreNormalized) {
  const auto model = random_model(2, 32, 4, 40, 32, GetParam());
  const auto trace = forward_trace(model, random_tokens(20, 40, 3));
  ASSERT_EQ(trace.dists.rows(), 20);
  for (std::size_t i = 0; i < 20; ++i) {
    const RowVector<float> d = trace.dist(i);
    EXPECT_TRUE(is_distribution(row_span(d), 1e-6)) << "position " << i;
  }
  EXPECT_EQ(trace.n_layers(), 2);
  EXPECT_EQ(trace.hidden[0].cols(), 32);
}

TEST_P(ModelPerScheme, IdentityPatchAtEveryLayerAndPosition) {
  const auto model = random_model(3, 32, 4, 30, 32, GetParam());
  const auto tokens = random_tokens(9, 30, 5);
  const auto base = forward_trace(model, tokens);
  for (int l = 0; l <= 3; ++l) {
    for (std::size_t m = 0; m < tokens.size(); ++m) {
      const PatchSpec<float> patch{l, m, base.state(l, m)};
      const auto patched = forward_patched(model, tokens, patch);
      for (int k = 0; k <= 3; ++k) EXPECT_LE(max_abs_diff(patched.hidden[k], base.hidden[k]), 1e-6);
      EXPECT_LE(max_abs_diff(patched.dists, base.dists), 1e-6);
    }
  }
}

TEST_P(ModelPerScheme, PatchRespectsCausality) {
  const auto model = random_model(3, 32, 4, 30, 32, GetParam());
  const auto tokens = random_tokens(10, 30, 7);
  const auto base = forward_trace(model, tokens);
  const std::size_t m = 4;
  const int l = 1;
  RowVector<float> v = RowVector<float>::Constant(32, 0.5f);
  const auto patched = forward_patched(model, tokens, {l, m, v});
  EXPECT_EQ(patched.state(l, m), v);
  for (int k = 0; k <= 3; ++k) {
    for (std::size_t i = 0; i < m; ++i) EXPECT_EQ(patched.state(k, i), base.state(k, i)) << k << "," << i;
  }
  for (int k = 0; k < l; ++k) EXPECT_EQ(patched.hidden[k], base.hidden[k]);
  EXPECT_GT(max_abs_diff(patched.hidden[3].bottomRows(6), base.hidden[3].bottomRows(6)), 1e-4);
}

TEST_P(ModelPerScheme, ForwardIsBitwiseDeterministic) {
  const auto model = random_model(2, 32, 4, 30, 32, GetParam());
  const auto tokens = random_tokens(16, 30, 9);
  EXPECT_TRUE(traces_equal(forward_trace(model, tokens), forward_trace(model, tokens)));
}

INSTANTIATE_TEST_SUITE_P(Schemes, ModelPerScheme,
                         ::testing::Values(PositionalScheme::kLearnedAbsolute, PositionalScheme::kRotary),
                         [](const auto& info) {
                           return info.param == PositionalScheme::kRotary ? std::string("Rotary")
                                                                          : std::string("LearnedAbsolute");
                         });

TEST(Model, LayerZeroIsEmbeddingPlusPosition) {
  const auto model = random_model(2, 32, 4, 30, 32);
  const std::vector<TokenId> single{7};
  const auto trace = forward_trace(model, single);
  const RowVector<float> expected = model.weights.token_embedding.row(7) + model.weights.position_embedding.row(0);
  EXPECT_EQ(trace.state(0, 0), expected);

  const auto rotary = random_model(2, 32, 4, 30, 32, PositionalScheme::kRotary);
  EXPECT_EQ(forward_trace(rotary, single).state(0, 0), RowVector<float>(rotary.weights.token_embedding.row(7)));
}

TEST(Model, PatchAfterLastBlockDecodesTheVectorAlone) {
  const auto model = random_model(2, 32, 4, 30, 32);
  RowVector<float> v(32);
  for (int i = 0; i < 32; ++i) v[i] = std::sin(0.3f * static_cast<float>(i));
  const RowVector<float> expected = model.network().decode(v);
  for (const std::uint64_t seed : {1, 2, 3}) {
    const auto tokens = random_tokens(6, 30, seed);
    const auto patched = forward_patched(model, tokens, {2, 5, v});
    EXPECT_LE((patched.dist(5) - expected).cwiseAbs().maxCoeff(), 1e-6f);
  }
}

TEST(Model, PatchAndOverrideErrors) {
  const auto model = random_model(2, 32, 4, 30, 8);
  const auto tokens = random_tokens(5, 30, 1);
  const RowVector<float> v = RowVector<float>::Zero(32);
  EXPECT_EQ(error_code_of([&] { forward_patched(model, tokens, {3, 0, v}); }), ErrorCode::kPatchOutOfRange);
  EXPECT_EQ(error_code_of([&] { forward_patched(model, tokens, {-1, 0, v}); }), ErrorCode::kPatchOutOfRange);
  EXPECT_EQ(error_code_of([&] { forward_patched(model, tokens, {1, 5, v}); }), ErrorCode::kPatchOutOfRange);
  RowVector<float> bad = v;
  bad[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_EQ(error_code_of([&] { forward_patched(model, tokens, {1, 1, bad}); }), ErrorCode::kPatchOutOfRange);
  EXPECT_EQ(error_code_of([&] { forward_patched(model, tokens, {1, 1, RowVector<float>::Zero(5)}); }),
            ErrorCode::kDimensionError);

  const std::vector<EmbeddingOverride<float>> overrides{{2, v}};
  const PatchSpec<float> clash{0, 2, v};
  EXPECT_EQ(error_code_of([&] { forward_with_embedding_overrides(model, tokens, overrides, &clash); }),
            ErrorCode::kOverrideConflict);
  const std::vector<EmbeddingOverride<float>> outside{{5, v}};
  EXPECT_EQ(error_code_of([&] { forward_with_embedding_overrides(model, tokens, outside); }),
            ErrorCode::kPatchOutOfRange);

  const auto too_long = random_tokens(9, 30, 2);
  EXPECT_EQ(error_code_of([&] { forward_trace(model, too_long); }), ErrorCode::kSequenceTooLong);
  EXPECT_EQ(error_code_of([&] { forward_trace(model, std::vector<TokenId>{}); }), ErrorCode::kEmptyInput);
  EXPECT_EQ(error_code_of([&] { forward_trace(model, std::vector<TokenId>{30}); }), ErrorCode::kRangeError);
}

TEST(Model, OverrideWithOwnEmbeddingIsIdentityAndComposesWithPatch) {
  const auto model = random_model(2, 32, 4, 30, 32);
  const auto tokens = random_tokens(7, 30, 4);
  const auto base = forward_trace(model, tokens);
  std::vector<EmbeddingOverride<float>> overrides;
  for (const std::size_t p : {0u, 3u}) overrides.push_back({p, model.weights.token_embedding.row(tokens[p])});
  const auto same = forward_with_embedding_overrides(model, tokens, overrides);
  EXPECT_EQ(same.dists, base.dists);

  overrides[1].vector.setConstant(0.25f);
  const auto changed = forward_with_embedding_overrides(model, tokens, overrides);
  const RowVector<float> expected_h0 = overrides[1].vector + model.weights.position_embedding.row(3);
  EXPECT_EQ(changed.state(0, 3), expected_h0);
  EXPECT_EQ(changed.state(1, 2), base.state(1, 2));

  const PatchSpec<float> patch{1, 5, base.state(1, 5)};
  const auto composed = forward_with_embedding_overrides(model, tokens, overrides, &patch);
  EXPECT_EQ(composed.state(1, 5), base.state(1, 5));
  EXPECT_EQ(composed.state(1, 3), changed.state(1, 3));
}

TEST(Model, GreedyGenerationIsSelfConsistent) {
  const auto model = random_model(2, 32, 4, 30, 32);
  const auto tokens = random_tokens(5, 30, 6);
  const auto one = greedy_generate(model, tokens, 1);
  ASSERT_EQ(one.new_tokens.size(), 1u);
  EXPECT_EQ(one.new_tokens[0], top1(forward_trace(model, tokens).dist(4)));

  const auto three = greedy_generate(model, tokens, 3);
  ASSERT_EQ(three.step_dists.size(), 3u);
  std::vector<TokenId> extended = tokens;
  extended.push_back(three.new_tokens[0]);
  const auto next = greedy_generate(model, extended, 1);
  EXPECT_EQ(next.new_tokens[0], three.new_tokens[1]);
  EXPECT_EQ(next.step_dists[0], three.step_dists[1]);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(three.new_tokens[i], top1(three.step_dists[i]));
  EXPECT_EQ(three.final_trace.length(), 8u);
}

TEST(Model, GenerationLengthErrors) {
  const auto model = random_model(2, 32, 4, 30, 8);
  const auto tokens = random_tokens(6, 30, 6);
  EXPECT_EQ(error_code_of([&] { greedy_generate(model, tokens, 3); }), ErrorCode::kSequenceTooLong);
  EXPECT_EQ(error_code_of([&] { greedy_generate(model, tokens, 0); }), ErrorCode::kRangeError);
  EXPECT_NO_THROW(greedy_generate(model, tokens, 2));
}

TEST(Model, ChecksumTracksWeights) {
  auto model = random_model(1, 16, 2, 10, 8);
  const auto before = weights_checksum(model.weights);
  EXPECT_EQ(before, weights_checksum(random_model(1, 16, 2, 10, 8).weights));
  model.weights.decoder(0, 0) += 1.0f;
  EXPECT_NE(before, weights_checksum(model.weights));
}

TEST(ToyTraining, HeldOutTemplateAccuracyAtLeastNinetyPercent) {
  const auto& w = toy_world();
  std::vector<std::vector<TokenId>> docs;
  std::vector<std::vector<bool>> mask;
  for (const auto d : w.split.test) {
    docs.push_back(w.documents[d]);
    mask.push_back(w.generated.deterministic[d]);
  }
  EXPECT_GE(next_token_accuracy(w.model, docs, mask), 0.90);
}

TEST(ToyTraining, NamedPhraseContinuesVerbatim) {
  const auto& w = toy_world();
  const auto out = greedy_generate(w.model, tokenize(w.model, "alpha"), 3);
  EXPECT_EQ(detokenize(w.model, out.new_tokens), "beta gamma delta");
}

TEST(ToyTraining, TrainingIsDeterministicAndZeroStepsKeepsInit) {
  const auto& w = toy_world();
  std::vector<std::vector<TokenId>> docs(w.documents.begin(), w.documents.begin() + 40);
  ModelConfig config{.n_layers = 1, .d_model = 16, .n_heads = 2};
  config.d_vocab = static_cast<int>(w.tokenizer.size());
  config.seed = 5;
  const auto a = train_toy_model(docs, config, w.tokenizer, {.steps = 20, .seed = 3});
  const auto b = train_toy_model(docs, config, w.tokenizer, {.steps = 20, .seed = 3});
  EXPECT_TRUE(a.model.weights == b.model.weights);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(a.losses.size(), 20u);
  EXPECT_LT(a.losses.back(), a.losses.front());
  const auto zero = train_toy_model(docs, config, w.tokenizer, {.steps = 0, .seed = 3});
  EXPECT_TRUE(zero.model.weights == init_model(config, w.tokenizer).weights);
}

TEST(ToyTraining, TooLittleDataIsInsufficient) {
  const auto& w = toy_world();
  ModelConfig config{.n_layers = 1, .d_model = 16, .n_heads = 2};
  config.d_vocab = static_cast<int>(w.tokenizer.size());
  const std::vector<std::vector<TokenId>> docs{{3}};
  EXPECT_EQ(error_code_of([&] { train_toy_model(docs, config, w.tokenizer, {.steps = 1}); }),
            ErrorCode::kInsufficientData);
}
