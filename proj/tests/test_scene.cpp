#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "pbd/errors.hpp"
#include "pbd/scene.hpp"

using namespace pbd;

namespace {

const Vocabulary& V() { return Vocabulary::standard(); }

Scene manual_scene(std::vector<SceneObject> objects, int grid = 8) {
  Scene s;
  s.grid = grid;
  s.objects = std::move(objects);
  return s;
}

std::set<int> categories_of(const std::vector<QueryCase>& cases, bool negative) {
  std::set<int> out;
  for (const auto& c : cases) {
    if (c.negative != negative) continue;
    for (int k = 0; k < V().num_categories(); ++k)
      if (c.query == std::vector<TokenId>{V().category_word(k)}) out.insert(k);
  }
  return out;
}

}  // namespace

TEST(Scene, Deterministic) {
  for (std::uint64_t seed : {1u, 2u, 99u}) EXPECT_EQ(generate_scene(seed, 5), generate_scene(seed, 5));
  EXPECT_NE(generate_scene(1, 5), generate_scene(2, 5));
}

TEST(Scene, NoObjectsAllowed) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_TRUE(generate_scene(seed, 0).objects.empty());
}

TEST(Scene, GridSnapAndGeometry) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    auto s = generate_scene(seed, 5);
    EXPECT_LE(s.objects.size(), 5u);
    std::set<std::pair<int, int>> cells;
    for (const auto& o : s.objects) {
      const auto& b = o.box;
      for (int v : {b.x1, b.y1, b.x2, b.y2}) {
        EXPECT_EQ(v % 125, 0);
        EXPECT_GE(v, 0);
        EXPECT_LE(v, 1000);
      }
      EXPECT_LT(b.x1, b.x2);
      EXPECT_LT(b.y1, b.y2);
      EXPECT_GE(o.category, 0);
      EXPECT_LT(o.category, 4);
      for (int x = b.x1 / 125; x < b.x2 / 125; ++x)
        for (int y = b.y1 / 125; y < b.y2 / 125; ++y) EXPECT_TRUE(cells.insert({x, y}).second) << "shared cell";
    }
  }
}

TEST(Scene, SameCategoryObjectsDoNotTouch) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    auto s = generate_scene(seed, 5);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      for (std::size_t j = i + 1; j < s.objects.size(); ++j) {
        const auto& a = s.objects[i];
        const auto& b = s.objects[j];
        if (a.category != b.category) continue;
        const bool apart = a.box.x2 < b.box.x1 || b.box.x2 < a.box.x1 || a.box.y2 < b.box.y1 || b.box.y2 < a.box.y1;
        EXPECT_TRUE(apart);
      }
    }
  }
}

TEST(Scene, ConfigValidation) {
  SceneConfig c;
  EXPECT_NO_THROW(c.validate());
  c.grid = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SceneConfig{};
  c.num_categories = 9;
  EXPECT_THROW(c.validate(), ConfigError);
  SceneConfig four;
  four.grid = 4;
  for (const auto& o : generate_scene(3, 5, four).objects) EXPECT_EQ(o.box.x2 % 250, 0);
}

TEST(VisualTokens, Encoding) {
  auto empty = scene_to_visual_tokens(manual_scene({}));
  EXPECT_EQ(empty, std::vector<TokenId>(64, V().visual_empty()));

  auto one = scene_to_visual_tokens(manual_scene({{2, {0, 0, 125, 125}}}));
  EXPECT_EQ(one[0], V().visual_cell(2));
  for (std::size_t i = 1; i < one.size(); ++i) EXPECT_EQ(one[i], V().visual_empty());

  // Row-major: (col 1, row 2) is index 2 * 8 + 1; moving right by one cell shifts by 1.
  auto a = scene_to_visual_tokens(manual_scene({{1, {125, 250, 375, 375}}}));
  auto b = scene_to_visual_tokens(manual_scene({{1, {250, 250, 500, 375}}}));
  EXPECT_EQ(a[17], V().visual_cell(1));
  EXPECT_EQ(a[18], V().visual_cell(1));
  EXPECT_EQ(a[16], V().visual_empty());
  std::vector<TokenId> shifted(64, V().visual_empty());
  for (int i = 0; i + 1 < 64; ++i)
    if (i % 8 != 7) shifted[i + 1] = a[i];
  EXPECT_EQ(b, shifted);
}

TEST(QueryCases, ExampleRatioHalf) {
  auto s = manual_scene({{0, {0, 0, 125, 125}}, {2, {500, 500, 625, 625}}, {0, {750, 0, 875, 125}}});
  s.seed = 4;
  auto cases = make_query_cases(s, 0.5);
  EXPECT_EQ(categories_of(cases, false), (std::set<int>{0, 2}));
  auto neg = categories_of(cases, true);
  EXPECT_EQ(neg.size(), 2u);
  for (int k : neg) EXPECT_TRUE(k == 1 || k == 3);
  ASSERT_EQ(cases.size(), 4u);
  EXPECT_EQ(cases[0].expected, (std::vector<QuantBox>{{0, 0, 125, 125}, {750, 0, 875, 125}}));
  for (const auto& c : cases) EXPECT_EQ(c.negative, c.expected.empty());
}

TEST(QueryCases, RatioExtremes) {
  auto s = manual_scene({{1, {0, 0, 125, 125}}});
  auto pos_only = make_query_cases(s, 0.0);
  ASSERT_EQ(pos_only.size(), 1u);
  EXPECT_FALSE(pos_only[0].negative);
  auto empty = make_query_cases(manual_scene({}), 1.0);
  EXPECT_EQ(empty.size(), 4u);
  for (const auto& c : empty) EXPECT_TRUE(c.negative);
  auto all_absent = make_query_cases(s, 1.0);
  EXPECT_EQ(categories_of(all_absent, true), (std::set<int>{0, 2, 3}));
}

TEST(QueryCases, ExpectedSortedAndLossless) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto s = generate_scene(seed, 5);
    for (const auto& qc : make_query_cases(s, 0.25)) {
      EXPECT_EQ(qc.expected, sort_boxes(qc.expected));
      auto parsed = parse_stream(flatten(expected_answer(qc)));
      ASSERT_TRUE(std::holds_alternative<ParsedAnswer>(parsed));
      const auto& ans = std::get<ParsedAnswer>(parsed);
      if (qc.negative) {
        EXPECT_TRUE(ans.groups.empty());
        EXPECT_EQ(ans.negatives.size(), 1u);
      } else {
        ASSERT_EQ(ans.groups.size(), 1u);
        EXPECT_EQ(ans.groups[0].boxes, qc.expected);
      }
    }
  }
}

TEST(QueryCases, Deterministic) {
  auto s = generate_scene(12, 5);
  EXPECT_EQ(make_query_cases(s, 0.4), make_query_cases(s, 0.4));
}

TEST(Dataset, SplitsAndRecords) {
  DatasetConfig cfg;
  cfg.scenes = 30;
  auto a = generate_split(cfg, 0);
  EXPECT_EQ(a, generate_split(cfg, 0));
  EXPECT_EQ(a.size(), 30u);
  EXPECT_NE(a, generate_split(cfg, 1));
  EXPECT_NE(scene_seed(1, 0, 0), scene_seed(1, 1, 0));
  EXPECT_NE(scene_seed(1, 0, 0), scene_seed(1, 0, 1));
  for (const auto& s : a) {
    std::ostringstream out;
    write_scene_record(out, s);
    auto line = out.str();
    if (!line.empty() && line.back() == '\n') line.pop_back();
    EXPECT_EQ(read_scene_record(line), s);
  }
  const auto path = (std::filesystem::temp_directory_path() / "pbd_scene_test.jsonl").string();
  write_scene_file(path, a);
  EXPECT_EQ(read_scene_file(path), a);
  std::filesystem::remove(path);
  EXPECT_THROW(read_scene_record("{\"seed\": 1}"), IoError);
  EXPECT_THROW(read_scene_record("not json"), IoError);
  EXPECT_THROW(read_scene_file("/nonexistent/scenes.jsonl"), IoError);
}

TEST(Dataset, TrainingExampleMatchesQuery) {
  auto s = generate_scene(5, 5);
  s.queries = make_query_cases(s, 0.25);
  for (const auto& qc : s.queries) {
    auto ex = make_training_example(s, qc);
    EXPECT_EQ(ex.layout.vis_len, 64);
    EXPECT_EQ(ex.layout.q_len, static_cast<int>(qc.query.size()));
    EXPECT_EQ(ex.layout.ntp_len, ex.layout.blk_len);
  }
}
