#include <gtest/gtest.h>

#include <random>

#include "pbd/config.hpp"
#include "pbd/errors.hpp"

using namespace pbd;

TEST(Config, DefaultsRoundTrip) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  const auto text = serialize_config(c);
  EXPECT_EQ(parse_config(text), c);
  EXPECT_EQ(serialize_config(parse_config(text)), text);
  EXPECT_EQ(c.data.scenes, 10000);
  EXPECT_EQ(c.eval_scenes, 500);
  EXPECT_EQ(c.decode.n_future, 6);
}

TEST(Config, EditedValuesRoundTrip) {
  RunConfig c;
  c.out_dir = "runs/a";
  c.train.lr = 0.1 + 0.2;  // not exactly representable in short decimal
  c.decode.mode = DecodeMode::Hybrid;
  c.decode.greedy = true;
  c.data.seed = 18446744073709551615ull;
  c.data.scene.grid = 4;
  auto back = parse_config(serialize_config(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.train.lr, c.train.lr);
  EXPECT_EQ(back.data.seed, c.data.seed);
}

TEST(Config, RandomEditsRoundTrip) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    RunConfig c;
    c.train.lr = std::uniform_real_distribution<double>(0, 1)(rng);
    c.decode.temperature = std::uniform_real_distribution<double>(0.01, 2)(rng);
    c.train.steps = std::uniform_int_distribution<int>(1, 100000)(rng);
    c.data.negative_ratio = std::uniform_real_distribution<double>(0, 1)(rng);
    EXPECT_EQ(parse_config(serialize_config(c)), c);
  }
}

TEST(Config, ParsesCommentsAndOverrides) {
  auto c = parse_config("# reference\n  train.steps = 42   # inline\n\ndecode.mode=slow\ndecode.greedy = 1\n");
  EXPECT_EQ(c.train.steps, 42);
  EXPECT_EQ(c.decode.mode, DecodeMode::Slow);
  EXPECT_TRUE(c.decode.greedy);
  RunConfig base;
  base.train.steps = 7;
  EXPECT_EQ(parse_config("train.lr = 0.5", base).train.steps, 7);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("nope = 1"), ConfigError);
  EXPECT_THROW(parse_config("train.steps = ten"), ConfigError);
  EXPECT_THROW(parse_config("train.steps"), ConfigError);
  EXPECT_THROW(parse_config("decode.mode = warp"), ConfigError);
  EXPECT_THROW(parse_config("decode.greedy = maybe"), ConfigError);
  try {
    parse_config("train.steps = 3\n\ntrain.lr = x");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  EXPECT_THROW(load_config("/nonexistent/run.cfg"), IoError);
  RunConfig bad;
  bad.data.scene.grid = 7;
  EXPECT_THROW(bad.validate(), ConfigError);
  RunConfig long_batch;
  long_batch.train.batch_tokens = long_batch.model.max_seq_len + 1;
  EXPECT_THROW(long_batch.validate(), ConfigError);
}

TEST(Config, EveryKeyDocumentedAndReadable) {
  RunConfig c;
  for (const auto& k : config_keys()) {
    EXPECT_FALSE(k.help.empty()) << k.name;
    const auto v = get_config_value(c, k.name);
    RunConfig d;
    set_config_value(d, k.name, v);
    EXPECT_EQ(get_config_value(d, k.name), v);
  }
}

TEST(Config, ReferenceFileMatchesReferenceConfig) {
  const auto file = load_config(std::string(PBD_SOURCE_DIR) + "/configs/reference.cfg");
  EXPECT_EQ(file, reference_config());
  EXPECT_NO_THROW(file.validate());
  EXPECT_EQ(file.data.scene.grid, 4);
  EXPECT_NO_THROW(load_config(std::string(PBD_SOURCE_DIR) + "/configs/smoke.cfg").validate());
}
