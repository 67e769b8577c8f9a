#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "pbd/errors.hpp"
#include "pbd/vocab.hpp"

using namespace pbd;

namespace {

// Round-half-up of n/10000 * 1000 in exact integer arithmetic.
int quantize_decimal4(int n) { return (n * 1000 * 2 + 10000) / 20000; }

}  // namespace

TEST(Vocabulary, RangesAreDisjointAndCover) {
  const auto& v = Vocabulary::standard();
  std::vector<TokenRange> ranges = {v.coord_range(), v.structural_range(), v.text_range(), v.visual_range()};
  EXPECT_EQ(v.coord_range().size(), 1001);
  EXPECT_EQ(v.structural_range().size(), 8);
  int covered = 0;
  for (TokenId t = 0; t < v.size(); ++t) {
    int hits = 0;
    for (const auto& r : ranges) hits += r.contains(t);
    EXPECT_EQ(hits, 1) << t;
    covered += hits;
  }
  EXPECT_EQ(covered, v.size());
  EXPECT_EQ(v.visual_range().end, v.size());
}

TEST(Vocabulary, CoordinateBijection) {
  std::set<TokenId> seen;
  for (int value = 0; value <= 1000; ++value) {
    TokenId t = coord_token(value);
    EXPECT_TRUE(is_coord(t));
    EXPECT_TRUE(seen.insert(t).second);
    EXPECT_EQ(Vocabulary::standard().surface(t), "<" + std::to_string(value) + ">");
  }
}

TEST(Vocabulary, SurfaceLookupRoundTrip) {
  const auto& v = Vocabulary::standard();
  for (TokenId t = 0; t < v.size(); ++t) EXPECT_EQ(v.lookup(v.surface(t)), t);
  EXPECT_EQ(v.lookup("<box>"), tok::kBox);
  EXPECT_EQ(v.lookup("[mask]"), tok::kMask);
  EXPECT_THROW(v.lookup("<1001>"), DomainError);
}

TEST(Vocabulary, CategoryTokens) {
  const auto& v = Vocabulary::standard();
  EXPECT_EQ(v.num_categories(), 4);
  EXPECT_EQ(v.surface(v.category_word(0)), "cat");
  EXPECT_EQ(v.surface(v.visual_cell(3)), "[cell:cup]");
  EXPECT_TRUE(v.is_visual(v.visual_empty()));
  EXPECT_THROW(v.category_word(4), DomainError);
}

TEST(Vocabulary, TableExportImport) {
  const auto& v = Vocabulary::standard();
  std::stringstream ss;
  v.export_table(ss);
  std::string first;
  std::getline(ss, first);
  EXPECT_EQ(first, "0\t<0>");
  ss.seekg(0);
  Vocabulary back = Vocabulary::import_table(ss);
  EXPECT_TRUE(back == v);
  EXPECT_EQ(back.size(), v.size());
}

TEST(Vocabulary, ImportRejectsGaps) {
  std::stringstream ss("0\t<0>\n2\t<1>\n");
  EXPECT_THROW(Vocabulary::import_table(ss), IoError);
}

TEST(Quantize, Examples) {
  EXPECT_EQ(quantize_coord(0.0), coord_token(0));
  EXPECT_EQ(quantize_coord(1.0), coord_token(1000));
  EXPECT_EQ(quantize_coord(0.4235), coord_token(quantize_decimal4(4235)));
  EXPECT_EQ(quantize_decimal4(4235), 424);
}

TEST(Quantize, AllFourDigitDecimalsMatchIntegerOracle) {
  for (int n = 0; n <= 10000; ++n) {
    ASSERT_EQ(quantize_coord(n / 10000.0), coord_token(quantize_decimal4(n))) << n;
  }
}

TEST(Quantize, ClampsOutOfRange) {
  EXPECT_EQ(quantize_coord(-0.2), coord_token(0));
  EXPECT_EQ(quantize_coord(1.7), coord_token(1000));
}

TEST(Dequantize, Examples) {
  EXPECT_DOUBLE_EQ(dequantize_coord(coord_token(500)), 0.5);
  EXPECT_DOUBLE_EQ(dequantize_coord(coord_token(0)), 0.0);
  EXPECT_DOUBLE_EQ(dequantize_coord(coord_token(424)), 424.0 / 1000.0);
  EXPECT_THROW(dequantize_coord(tok::kBox), DomainError);
  EXPECT_THROW(dequantize_coord(-1), DomainError);
}

TEST(Quantize, InverseIsIdentityOnTokens) {
  for (int value = 0; value <= 1000; ++value) {
    EXPECT_EQ(quantize_coord(dequantize_coord(coord_token(value))), coord_token(value));
  }
}

TEST(Quantize, ErrorBound) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // Ties within 1e-12 of a half step round up, hence the slack.
  for (int i = 0; i < 200000; ++i) {
    double v = u(rng);
    ASSERT_LE(std::abs(dequantize_coord(quantize_coord(v)) - v), 0.0005 + 1e-12) << v;
  }
}
