#include <gtest/gtest.h>

#include <vector>

#include "flns/distribution.hpp"
#include "flns/errors.hpp"
#include "flns/tokenizer.hpp"
#include "support/toy.hpp"

using namespace flns;
using flns::testing::error_code_of;

namespace {

Tokenizer ab_tokenizer() { return Tokenizer({"a", "b", "madison", "square", "garden"}, {false, false, false, false, false}); }

}  // namespace

TEST(Tokenizer, DirectLookup) {
  EXPECT_EQ(ab_tokenizer().encode("a b"), (std::vector<TokenId>{0, 1}));
}

TEST(Tokenizer, RoundTripNormalizesWhitespace) {
  const Tokenizer t = ab_tokenizer();
  EXPECT_EQ(t.decode(t.encode("madison square garden")), "madison square garden");
  EXPECT_EQ(t.decode(t.encode("  madison\tsquare \n garden ")), "madison square garden");
}

TEST(Tokenizer, EmptyAndBlankInputRejected) {
  const Tokenizer t = ab_tokenizer();
  EXPECT_EQ(error_code_of([&] { t.encode(""); }), ErrorCode::kEmptyInput);
  EXPECT_EQ(error_code_of([&] { t.encode(" \t\n"); }), ErrorCode::kEmptyInput);
}

TEST(Tokenizer, UnknownSymbolReportsOffendingFragment) {
  try {
    ab_tokenizer().encode("a zebra b");
    FAIL() << "expected UnknownSymbol";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownSymbol);
    const std::string what = e.what();
    EXPECT_NE(what.find("zebra"), std::string::npos);
    EXPECT_NE(what.find('2'), std::string::npos) << "byte offset of the fragment: " << what;
  }
}

TEST(Tokenizer, FromDocumentsPutsSpecialsFirstThenSortedWords) {
  const std::vector<std::string> docs{"b a c", "a d"};
  const Tokenizer t = Tokenizer::from_documents(docs);
  ASSERT_EQ(t.size(), Tokenizer::kDefaultSpecials.size() + 4);
  for (std::size_t i = 0; i < Tokenizer::kDefaultSpecials.size(); ++i) {
    EXPECT_EQ(t.text(static_cast<TokenId>(i)), Tokenizer::kDefaultSpecials[i]);
    EXPECT_TRUE(t.is_special(static_cast<TokenId>(i)));
  }
  const auto first = static_cast<TokenId>(Tokenizer::kDefaultSpecials.size());
  EXPECT_EQ(t.text(first), "a");
  EXPECT_EQ(t.text(first + 3), "d");
  EXPECT_FALSE(t.is_special(first));
}

TEST(Tokenizer, RejectsDuplicateOrBlankEntries) {
  EXPECT_EQ(error_code_of([] { Tokenizer({"a", "a"}, {false, false}); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(error_code_of([] { Tokenizer({"a b"}, {false}); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(error_code_of([] { Tokenizer({"a"}, {false, true}); }), ErrorCode::kInvalidConfig);
}

TEST(Tokenizer, DecodeOutOfRangeIdIsRangeError) {
  const std::vector<TokenId> ids{7};
  EXPECT_EQ(error_code_of([&] { ab_tokenizer().decode(ids); }), ErrorCode::kRangeError);
}

TEST(Tokenizer, SplitWordsReportsOffsets) {
  const auto words = split_words(" ab  c");
  ASSERT_EQ(words.size(), 2u);
  EXPECT_EQ(words[0].first, 1u);
  EXPECT_EQ(words[0].second, "ab");
  EXPECT_EQ(words[1].first, 5u);
  EXPECT_EQ(words[1].second, "c");
}

TEST(Distribution, ArgmaxLowestIdWinsTies) {
  const std::vector<float> v{0.1f, 0.4f, 0.4f, 0.1f};
  EXPECT_EQ(argmax(std::span<const float>(v)), 1);
}

TEST(Distribution, TopKOrdersByValueThenId) {
  const std::vector<float> v{0.2f, 0.3f, 0.2f, 0.3f, 0.0f};
  EXPECT_EQ(top_k(std::span<const float>(v), 4), (std::vector<TokenId>{1, 3, 0, 2}));
  EXPECT_EQ(top_k(std::span<const float>(v), 99).size(), v.size());
}

TEST(Distribution, KlIsZeroForIdenticalAndPositiveOtherwise) {
  const std::vector<double> p{0.5, 0.25, 0.25};
  const std::vector<double> q{0.25, 0.5, 0.25};
  EXPECT_NEAR(kl_divergence(std::span<const double>(p), std::span<const double>(p)), 0.0, 1e-12);
  // 0.5 ln 2 - 0.25 ln 2
  EXPECT_NEAR(kl_divergence(std::span<const double>(p), std::span<const double>(q)), 0.25 * std::log(2.0), 1e-12);
}

TEST(Distribution, SoftmaxIsShiftInvariantAndNormalized) {
  const std::vector<double> a{1.0, 2.0, 3.0};
  const std::vector<double> b{1001.0, 1002.0, 1003.0};
  const auto pa = softmax(a);
  const auto pb = softmax(b);
  EXPECT_TRUE(is_distribution(std::span<const double>(pa), 1e-12));
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_NEAR(pa[i], pb[i], 1e-12);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(pa[2], std::exp(3.0) / z, 1e-12);
}

TEST(Distribution, IsDistributionRejectsNegativeOrUnnormalized) {
  const std::vector<float> neg{1.2f, -0.2f};
  const std::vector<float> low{0.3f, 0.3f};
  EXPECT_FALSE(is_distribution(std::span<const float>(neg)));
  EXPECT_FALSE(is_distribution(std::span<const float>(low)));
}
