#include <gtest/gtest.h>

#include <random>

#include "pbd/errors.hpp"
#include "pbd/eval.hpp"

using namespace pbd;

namespace {

// Unit-cell counting on a small integer grid.
double iou_by_cells(const QuantBox& a, const QuantBox& b) {
  int inter = 0, uni = 0;
  for (int x = 0; x < 24; ++x) {
    for (int y = 0; y < 24; ++y) {
      const bool in_a = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
      const bool in_b = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni ? double(inter) / uni : 0.0;
}

QuantBox random_box(std::mt19937_64& rng, int hi) {
  std::uniform_int_distribution<int> c(0, hi);
  int a = c(rng), b = c(rng), d = c(rng), e = c(rng);
  return {std::min(a, b), std::min(d, e), std::max(a, b), std::max(d, e)};
}

// Size of a maximum matching among pairs above t, by exhaustive search.
int max_matching(const std::vector<QuantBox>& p, const std::vector<QuantBox>& g, double t, std::size_t i,
                 std::vector<char>& used) {
  if (i == p.size()) return 0;
  int best = max_matching(p, g, t, i + 1, used);
  for (std::size_t j = 0; j < g.size(); ++j) {
    if (used[j] || !(iou(p[i], g[j]) > t)) continue;
    used[j] = 1;
    best = std::max(best, 1 + max_matching(p, g, t, i + 1, used));
    used[j] = 0;
  }
  return best;
}

}  // namespace

TEST(Iou, Examples) {
  EXPECT_DOUBLE_EQ(iou({10, 10, 50, 60}, {10, 10, 50, 60}), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {20, 20, 30, 30}), 0.0);
  EXPECT_NEAR(iou({0, 0, 100, 100}, {50, 50, 150, 150}), 2500.0 / 17500.0, 1e-15);
  EXPECT_DOUBLE_EQ(iou({5, 5, 5, 9}, {5, 5, 5, 9}), 0.0);
}

TEST(Iou, MatchesCellCountingAndIsSymmetric) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 2000; ++i) {
    auto a = random_box(rng, 20), b = random_box(rng, 20);
    EXPECT_NEAR(iou(a, b), iou_by_cells(a, b), 1e-12);
    EXPECT_EQ(iou(a, b), iou(b, a));
  }
}

TEST(Match, Examples) {
  std::vector<QuantBox> gts = {{0, 0, 100, 100}, {200, 200, 300, 300}};
  EXPECT_EQ(match_at_threshold(gts, gts, 0.95), (MatchCounts{2, 0, 0}));
  std::vector<QuantBox> far = {{500, 500, 600, 600}};
  std::vector<QuantBox> one = {{0, 0, 100, 100}};
  EXPECT_EQ(match_at_threshold(far, one, 0.5), (MatchCounts{0, 1, 1}));
  // IoU 0.9 and 0.8 against one truth.
  std::vector<QuantBox> two = {{0, 0, 100, 90}, {0, 0, 100, 80}};
  EXPECT_NEAR(iou(two[0], one[0]), 0.9, 1e-12);
  EXPECT_NEAR(iou(two[1], one[0]), 0.8, 1e-12);
  EXPECT_EQ(match_at_threshold(two, one, 0.5), (MatchCounts{1, 1, 0}));
  EXPECT_THROW(match_at_threshold(two, one, 0.0), ContractError);
  EXPECT_THROW(match_at_threshold(two, one, 1.5), ContractError);
}

TEST(Match, StrictThreshold) {
  std::vector<QuantBox> p = {{0, 0, 100, 50}}, g = {{0, 0, 100, 100}};
  EXPECT_EQ(match_at_threshold(p, g, 0.5).tp, 0);
  EXPECT_EQ(match_at_threshold(p, g, 0.49).tp, 1);
}

TEST(Match, Properties) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> n(0, 5);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<QuantBox> p(n(rng)), g(n(rng));
    for (auto& b : p) b = random_box(rng, 40);
    for (auto& b : g) b = random_box(rng, 40);
    int prev_tp = 1 << 30;
    for (double t : iou_thresholds()) {
      auto c = match_at_threshold(p, g, t);
      EXPECT_EQ(c.tp + c.fn, static_cast<int>(g.size()));
      EXPECT_EQ(c.tp + c.fp, static_cast<int>(p.size()));
      EXPECT_LE(c.tp, prev_tp);
      std::vector<char> used(g.size(), 0);
      EXPECT_LE(c.tp, max_matching(p, g, t, 0, used));
      prev_tp = c.tp;
    }
  }
}

TEST(F1, Formula) {
  EXPECT_NEAR(f1_score({3, 1, 2}), 2 * 0.75 * 0.6 / 1.35, 1e-15);
  EXPECT_DOUBLE_EQ(f1_score({0, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(f1_score({0, 2, 0}), 0.0);
  EXPECT_DOUBLE_EQ(f1_score({0, 0, 3}), 0.0);
  EXPECT_DOUBLE_EQ(f1_score({0, 1, 1}), 0.0);
}

TEST(F1, SuiteCases) {
  std::vector<QuantBox> g = {{0, 0, 125, 125}, {250, 500, 375, 750}};
  auto perfect = f1_suite(g, g);
  EXPECT_DOUBLE_EQ(perfect.f1_50, 1.0);
  EXPECT_DOUBLE_EQ(perfect.f1_95, 1.0);
  EXPECT_DOUBLE_EQ(perfect.f1_mean, 1.0);
  auto empty = f1_suite(std::vector<QuantBox>{}, std::vector<QuantBox>{});
  EXPECT_DOUBLE_EQ(empty.f1_50, 1.0);
  EXPECT_DOUBLE_EQ(empty.f1_mean, 1.0);
  auto hallucinated = f1_suite(g, std::vector<QuantBox>{});
  EXPECT_DOUBLE_EQ(hallucinated.f1_mean, 0.0);
  // IoU 0.9: counted at 0.50..0.85, missed at 0.90 and 0.95.
  std::vector<QuantBox> p = {{0, 0, 100, 90}}, one = {{0, 0, 100, 100}};
  auto s = f1_suite(p, one);
  EXPECT_DOUBLE_EQ(s.f1_50, 1.0);
  EXPECT_DOUBLE_EQ(s.f1_95, 0.0);
  EXPECT_NEAR(s.f1_mean, 0.8, 1e-12);
  EXPECT_EQ(iou_thresholds().size(), 10u);
}

TEST(F1, CorpusSumsCounts) {
  MatchResult r;
  std::vector<QuantBox> a = {{0, 0, 10, 10}};
  r.add(a, a);
  r.add(std::vector<QuantBox>{}, std::vector<QuantBox>{});
  r.add(a, std::vector<QuantBox>{});
  EXPECT_EQ(r.counts[0], (MatchCounts{1, 1, 0}));
  EXPECT_NEAR(f1_suite(r).f1_50, 2 * 0.5 / 1.5, 1e-12);
}

TEST(PointHit, Inclusive) {
  QuantBox b{100, 200, 300, 400};
  EXPECT_TRUE(point_hit(200, 300, b));
  EXPECT_TRUE(point_hit(100, 200, b));
  EXPECT_TRUE(point_hit(300, 400, b));
  EXPECT_FALSE(point_hit(99.5, 300, b));
  EXPECT_FALSE(point_hit(200, 401, b));
}

TEST(Bps, Definition) {
  DecodeTrace t;
  for (int i = 0; i < 10; ++i) {
    for (TokenId x : std::vector<TokenId>{tok::kBox, 1, 2, 3, 4, tok::kBoxEnd}) t.tokens.push_back(x);
  }
  std::vector<TokenId> head = {tok::kRef, Vocabulary::standard().category_word(0), tok::kRefEnd,
                               tok::kNull, tok::kNull, tok::kNull};
  t.tokens.insert(t.tokens.begin(), head.begin(), head.end());
  t.seconds = 2.0;
  t.forward_passes = 11;
  auto r = measure_bps(t);
  EXPECT_EQ(r.boxes, 10);
  EXPECT_DOUBLE_EQ(r.bps, 5.0);
  EXPECT_EQ(r.forward_passes, 11);
  EXPECT_FALSE(r.clamped);

  DecodeTrace none;
  none.seconds = 1.0;
  EXPECT_DOUBLE_EQ(measure_bps(none).bps, 0.0);
  none.seconds = 0.0;
  auto z = measure_bps(none);
  EXPECT_TRUE(z.clamped);
  EXPECT_GT(z.seconds, 0.0);
}

TEST(F1Suite, PerfectMeanIsExactlyOne) {
  MatchResult r;
  r.add({}, {});
  const QuantBox b{0, 0, 250, 250};
  r.add(std::vector<QuantBox>{b}, std::vector<QuantBox>{b});
  const auto s = f1_suite(r);
  EXPECT_EQ(s.f1_mean, 1.0);
  EXPECT_EQ(s.p_mean, 1.0);
  EXPECT_EQ(s.r_mean, 1.0);
}
