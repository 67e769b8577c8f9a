#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "pbd/errors.hpp"
#include "pbd/sequence.hpp"

using namespace pbd;

namespace {

const Vocabulary& V() { return Vocabulary::standard(); }
constexpr TokenId M = tok::kMask;

std::vector<TokenId> vis2() { return {V().visual_empty(), V().visual_cell(0)}; }

int count_stream(const TrainingExample& ex, LossStream s) {
  return static_cast<int>(std::count(ex.streams.begin(), ex.streams.end(), s));
}

std::vector<TokenId> targets_of(const TrainingExample& ex, LossStream s) {
  std::vector<TokenId> out;
  for (int i = 0; i < ex.size(); ++i)
    if (ex.streams[i] == s) out.push_back(ex.targets[i]);
  return out;
}

}  // namespace

TEST(ExpandToBlocks, BoxBlock) {
  std::vector<TokenId> box = {tok::kBox, 100, 200, 300, 400, tok::kBoxEnd};
  auto e = expand_to_blocks(box, tok::kRefEnd);
  EXPECT_EQ(e.inputs, (std::vector<TokenId>{tok::kRefEnd, M, M, M, M, M}));
  EXPECT_EQ(e.targets, box);
}

TEST(ExpandToBlocks, BlockSizeOneIsShift) {
  std::vector<TokenId> s = {5, 6, 7, 8};
  auto e = expand_to_blocks(s, 99, 1);
  EXPECT_EQ(e.inputs, (std::vector<TokenId>{99, 5, 6, 7}));
  EXPECT_EQ(e.targets, s);
}

TEST(ExpandToBlocks, TwoBlocksIndependent) {
  std::vector<TokenId> a = {tok::kBox, 1, 2, 3, 4, tok::kBoxEnd};
  std::vector<TokenId> b = {tok::kBox, 5, 6, 7, 8, tok::kBoxEnd};
  std::vector<TokenId> both = a;
  both.insert(both.end(), b.begin(), b.end());
  auto e = expand_to_blocks(both, 42);
  auto ea = expand_to_blocks(a, 42);
  auto eb = expand_to_blocks(b, a.back());
  std::vector<TokenId> joined = ea.inputs;
  joined.insert(joined.end(), eb.inputs.begin(), eb.inputs.end());
  EXPECT_EQ(e.inputs, joined);
  EXPECT_THROW(expand_to_blocks({1, 2, 3}, 42), ContractError);
}

TEST(AssembleExample, CatExampleCounts) {
  const TokenId cat = V().category_word(0);
  auto blocks = encode_answer({{{cat}, {{100, 200, 300, 400}}}}, {});
  auto ex = assemble_training_example(vis2(), {cat}, blocks);
  EXPECT_EQ(ex.size(), 2 + 1 + 18 + 18);
  EXPECT_EQ(count_stream(ex, LossStream::Ntp), 18);
  EXPECT_EQ(count_stream(ex, LossStream::Mtp), 18);
  // Entry into the answer is supervised at the last query position.
  EXPECT_EQ(ex.targets[2], tok::kRef);
  EXPECT_EQ(ex.streams[2], LossStream::Ntp);
  // Last ntp position has nothing left to predict.
  EXPECT_EQ(ex.targets[3 + 17], kIgnore);
  // Block 1 (the box) is anchored on the semantic block's last token.
  const int blk = ex.layout.blk_begin();
  EXPECT_EQ(ex.tokens[blk + 6], tok::kNull);
  EXPECT_EQ(ex.targets[blk + 6], tok::kBox);
  EXPECT_EQ(ex.positions[blk + 6], ex.positions[3 + 5]);
  for (int i = 0; i < 2; ++i) EXPECT_EQ(ex.targets[i], kIgnore);
}

TEST(AssembleExample, EmptyAnswer) {
  auto ex = assemble_training_example(vis2(), {V().category_word(1)}, encode_answer({}, {}));
  EXPECT_EQ(ex.layout.ntp_len, 6);
  EXPECT_EQ(ex.layout.blk_len, 6);
  EXPECT_EQ(ex.tokens[ex.layout.blk_begin()], V().category_word(1));
}

TEST(AssembleExample, PackedPair) {
  const TokenId cat = V().category_word(0);
  auto a = assemble_training_example(vis2(), {cat}, encode_answer({}, {}));
  auto b = assemble_training_example(vis2(), {cat}, encode_answer({{{cat}, {{1, 2, 3, 4}}}}, {}));
  auto p = pack_examples({a, b});
  EXPECT_EQ(p.layout.sub_sample_lengths(), (std::vector<int>{a.size(), b.size()}));
  EXPECT_EQ(p.size(), a.size() + b.size());
  EXPECT_EQ(p.positions[a.size()], 0);
  EXPECT_NO_THROW(build_training_mask(p.layout));
}

TEST(AssembleExample, Errors) {
  EXPECT_THROW(assemble_training_example(vis2(), {}, encode_answer({}, {})), ContractError);
  EXPECT_THROW(assemble_training_example({tok::kBox}, {V().category_word(0)}, encode_answer({}, {})),
               ContractError);
}

TEST(AssembleExample, TargetConservationAndLayoutConsistency) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> coord(0, 1000), nb(0, 5), cat(0, 3), nv(0, 20);
  for (int t = 0; t < 200; ++t) {
    std::vector<AnswerGroup> groups;
    if (nb(rng) > 0) {
      AnswerGroup g{{V().category_word(cat(rng))}, {}};
      for (int i = nb(rng) + 1; i > 0; --i) {
        int a = coord(rng), b = coord(rng);
        g.boxes.push_back({std::min(a, b), std::min(a, b), std::max(a, b), std::max(a, b)});
      }
      groups.push_back(g);
    }
    std::vector<TokenId> vis(nv(rng), V().visual_empty());
    auto ex = assemble_training_example(vis, {V().category_word(cat(rng))}, encode_answer(groups, {}));
    auto n = targets_of(ex, LossStream::Ntp), m = targets_of(ex, LossStream::Mtp);
    std::sort(n.begin(), n.end());
    std::sort(m.begin(), m.end());
    EXPECT_EQ(n, m);
    for (int i = 0; i < ex.size(); ++i) {
      if (ex.targets[i] != kIgnore) {
        EXPECT_TRUE(V().contains(ex.targets[i]));
      }
      EXPECT_EQ(ex.targets[i] == kIgnore, ex.streams[i] == LossStream::None);
    }
    EXPECT_NO_THROW(build_training_mask(ex.layout));
  }
}

TEST(AssembleExample, BlockSizeOneStreamsArePositionallyIdentical) {
  const TokenId cat = V().category_word(2);
  auto answer = flatten(encode_answer({{{cat}, {{1, 2, 3, 4}, {50, 60, 70, 80}}}}, {}));
  auto ex = assemble_training_example(vis2(), {cat}, answer, 1);
  const int P = ex.layout.context_len(), n = ex.layout.ntp_len, B = ex.layout.blk_begin();
  for (int k = 0; k < n; ++k) {
    EXPECT_EQ(ex.tokens[B + k], ex.tokens[P - 1 + k]);
    EXPECT_EQ(ex.positions[B + k], ex.positions[P - 1 + k]);
    EXPECT_EQ(ex.targets[B + k], ex.targets[P - 1 + k]);
  }
}

TEST(ExampleRecord, RoundTrip) {
  const TokenId cat = V().category_word(0);
  auto ex = assemble_training_example(vis2(), {cat}, encode_answer({{{cat}, {{1, 2, 3, 4}}}}, {}));
  std::stringstream ss;
  write_example_record(ss, ex);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(read_example_record(line), ex);
  EXPECT_THROW(read_example_record("{\"tokens\":[1]}"), IoError);
  EXPECT_THROW(read_example_record("not json"), IoError);
}
