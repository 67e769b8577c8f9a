#include <gtest/gtest.h>

#include <map>
#include <random>

#include "pbd/errors.hpp"
#include "pbd/mask.hpp"
#include "pbd/packer.hpp"

using namespace pbd;

namespace {

using Ex = std::pair<int, int>;  // (id, length)

StreamPacker<Ex> packer_over(std::vector<Ex> items, int budget, int buffer = 32, std::uint64_t seed = 0) {
  return StreamPacker<Ex>({list_source(std::move(items))}, {1.0}, [](const Ex& e) { return e.second; }, budget,
                          buffer, seed);
}

std::vector<PackedBatch<Ex>> drain(StreamPacker<Ex>& p) {
  std::vector<PackedBatch<Ex>> out;
  while (auto b = p.next()) out.push_back(std::move(*b));
  return out;
}

std::vector<int> lengths(const PackedBatch<Ex>& b) { return b.lengths; }

// Endless uniform lengths.
std::function<std::optional<Ex>()> uniform_source(int lo, int hi, std::uint64_t seed) {
  auto rng = std::make_shared<std::mt19937_64>(seed);
  auto id = std::make_shared<int>(0);
  return [=]() -> std::optional<Ex> {
    return Ex{(*id)++, std::uniform_int_distribution<int>(lo, hi)(*rng)};
  };
}

}  // namespace

TEST(Packer, HandTrace) {
  auto p = packer_over({{0, 60}, {1, 50}, {2, 40}}, 100);
  auto batches = drain(p);
  ASSERT_EQ(batches.size(), 2u);
  EXPECT_EQ(lengths(batches[0]), (std::vector<int>{60, 40}));
  EXPECT_EQ(lengths(batches[1]), (std::vector<int>{50}));
}

TEST(Packer, ExactFitsAndSingleExample) {
  auto p = packer_over({{0, 100}, {1, 100}, {2, 100}}, 100);
  auto batches = drain(p);
  ASSERT_EQ(batches.size(), 3u);
  for (const auto& b : batches) EXPECT_EQ(b.items.size(), 1u);
  EXPECT_DOUBLE_EQ(packing_efficiency(batches), 1.0);

  auto one = packer_over({{7, 33}}, 100);
  auto single = drain(one);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0].items[0].first, 7);
}

TEST(Packer, EfficiencyDefinition) {
  PackedBatch<Ex> b;
  b.budget = 100;
  b.lengths = {95};
  EXPECT_DOUBLE_EQ(packing_efficiency(std::vector<PackedBatch<Ex>>{b}), 0.95);
  EXPECT_THROW(packing_efficiency(std::vector<PackedBatch<Ex>>{}), ContractError);
}

TEST(Packer, RejectsOversizedExample) {
  auto p = packer_over({{0, 50}, {1, 150}}, 100);
  try {
    drain(p);
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("length 150"), std::string::npos);
  }
  EXPECT_THROW(packer_over({{0, 0}}, 100).next(), DomainError);
}

TEST(Packer, BadConstruction) {
  auto len = [](const Ex& e) { return e.second; };
  EXPECT_THROW(StreamPacker<Ex>({}, {}, len, 10), ContractError);
  EXPECT_THROW(StreamPacker<Ex>({list_source<Ex>({})}, {0.0}, len, 10), ContractError);
  EXPECT_THROW(StreamPacker<Ex>({list_source<Ex>({})}, {1.0}, len, 0), ContractError);
}

TEST(Packer, UniformLengthsPackTightly) {
  StreamPacker<Ex> p({uniform_source(200, 2000, 3)}, {1.0}, [](const Ex& e) { return e.second; }, 36864, 32, 1);
  std::vector<PackedBatch<Ex>> batches;
  for (int i = 0; i < 1000; ++i) batches.push_back(*p.next());
  EXPECT_GT(packing_efficiency(batches), 0.95);
}

TEST(Packer, DrainedStreamConservesItems) {
  std::mt19937_64 rng(5);
  std::vector<Ex> items;
  for (int i = 0; i < 10000; ++i) items.push_back({i, std::uniform_int_distribution<int>(1, 700)(rng)});
  auto p = packer_over(items, 1024, 8, 2);
  std::map<int, int> seen;
  int batches = 0;
  while (auto b = p.next()) {
    ++batches;
    EXPECT_LE(b->tokens(), b->budget);
    EXPECT_LE(p.buffer_size(), p.buffer_capacity());
    ASSERT_EQ(b->items.size(), b->lengths.size());
    for (std::size_t i = 0; i < b->items.size(); ++i) {
      EXPECT_EQ(b->items[i].second, b->lengths[i]);
      ++seen[b->items[i].first];
    }
  }
  EXPECT_EQ(seen.size(), items.size());
  for (const auto& [id, n] : seen) EXPECT_EQ(n, 1) << id;
  EXPECT_LE(p.stats().max_buffer, 8);
  EXPECT_EQ(p.stats().ingested, 10000);
  EXPECT_EQ(p.stats().emitted, 10000);
  EXPECT_EQ(p.stats().batches, batches);
}

TEST(Packer, FullBufferForcesEmission) {
  // Buffer of 1: 90 fills the batch, 80 is buffered, 70 fits nowhere.
  auto p = packer_over({{0, 90}, {1, 80}, {2, 70}, {3, 5}}, 100, 1);
  auto batches = drain(p);
  EXPECT_GE(p.stats().forced_emissions, 1);
  int total = 0;
  for (const auto& b : batches) total += static_cast<int>(b.items.size());
  EXPECT_EQ(total, 4);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(lengths(batches[0]), (std::vector<int>{90}));
  EXPECT_EQ(lengths(batches[1]), (std::vector<int>{80, 5}));
  EXPECT_EQ(lengths(batches[2]), (std::vector<int>{70}));
}

TEST(Packer, Deterministic) {
  auto run = [] {
    StreamPacker<Ex> p({uniform_source(10, 300, 1), uniform_source(10, 300, 2)}, {2.0, 1.0},
                       [](const Ex& e) { return e.second; }, 1000, 16, 9);
    std::vector<std::vector<int>> out;
    for (int i = 0; i < 50; ++i) out.push_back(p.next()->lengths);
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Packer, WeightedSampling) {
  auto tagged = [](int tag) {
    return std::function<std::optional<Ex>()>([tag]() -> std::optional<Ex> { return Ex{tag, 10}; });
  };
  StreamPacker<Ex> p({tagged(0), tagged(1)}, {3.0, 1.0}, [](const Ex& e) { return e.second; }, 100, 4, 4);
  int zeros = 0, total = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto batch = p.next();
    for (const auto& e : batch->items) {
      zeros += e.first == 0;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(zeros) / total, 0.75, 0.02);
}

TEST(Packer, ExhaustedSourceIsSkipped) {
  auto len = [](const Ex& e) { return e.second; };
  StreamPacker<Ex> p({list_source<Ex>({{0, 10}}), list_source<Ex>({{1, 10}, {2, 10}})}, {100.0, 1.0}, len, 100);
  auto b = p.next();
  ASSERT_TRUE(b);
  EXPECT_EQ(b->items.size(), 3u);
  EXPECT_FALSE(p.next());
}

TEST(Packer, ShuffledCycleVisitsEveryIndexPerPass) {
  auto src = shuffled_cycle(7, 3);
  for (int pass = 0; pass < 3; ++pass) {
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7; ++i) ++hits[*src()];
    for (int h : hits) EXPECT_EQ(h, 1);
  }
  EXPECT_THROW(shuffled_cycle(0, 1), ContractError);
}

TEST(Packer, PackedMaskIsolatesSubSamples) {
  auto p = packer_over({{0, 30}, {1, 18}, {2, 20}, {3, 24}}, 64);
  while (auto b = p.next()) {
    PackedLayout packed;
    for (int len : b->lengths) packed.samples.push_back({len - 13, 1, 6, 6, 6});
    const auto mask = build_training_mask(packed);
    std::vector<int> owner;
    for (std::size_t s = 0; s < b->lengths.size(); ++s)
      for (int i = 0; i < b->lengths[s]; ++i) owner.push_back(static_cast<int>(s));
    for (int q = 0; q < mask.rows(); ++q)
      for (int k = 0; k < mask.cols(); ++k)
        if (owner[q] != owner[k]) {
          EXPECT_FALSE(mask.allowed(q, k));
        }
  }
}
