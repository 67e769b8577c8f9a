// SPDX-License-Identifier: Apache-2.0
#include "pbd/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "pbd/errors.hpp"

namespace pbd {

namespace {

template <class T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("bad value for " + std::string(key) + ": '" + std::string(v) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + std::string(key) + ": '" + std::string(v) + "'");
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Entry {
  ConfigKey key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <class T>
Entry field(std::string name, std::string help, T RunConfig::*member) {
  return {{name, std::move(help)},
          [member](const RunConfig& c) { return std::to_string(c.*member); },
          [member, name](RunConfig& c, std::string_view v) { c.*member = parse_number<T>(name, v); }};
}

template <class S, class T>
Entry nested(std::string name, std::string help, std::function<S&(RunConfig&)> outer, T S::*member) {
  auto get = [outer, member](const RunConfig& c) {
    const T& v = outer(const_cast<RunConfig&>(c)).*member;
    if constexpr (std::is_same_v<T, double>) {
      return fmt_double(v);
    } else if constexpr (std::is_same_v<T, bool>) {
      return std::string(v ? "true" : "false");
    } else {
      return std::to_string(v);
    }
  };
  auto set = [outer, member, name](RunConfig& c, std::string_view v) {
    if constexpr (std::is_same_v<T, bool>) {
      outer(c).*member = parse_bool(name, v);
    } else {
      outer(c).*member = parse_number<T>(name, v);
    }
  };
  return {{name, std::move(help)}, get, set};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::function<DatasetConfig&(RunConfig&)> data = [](RunConfig& c) -> DatasetConfig& { return c.data; };
    std::function<SceneConfig&(RunConfig&)> scene = [](RunConfig& c) -> SceneConfig& { return c.data.scene; };
    std::function<ModelConfig&(RunConfig&)> model = [](RunConfig& c) -> ModelConfig& { return c.model; };
    std::function<TrainConfig&(RunConfig&)> train = [](RunConfig& c) -> TrainConfig& { return c.train; };
    std::function<LossWeights&(RunConfig&)> weights = [](RunConfig& c) -> LossWeights& { return c.train.weights; };
    std::function<DecodeConfig&(RunConfig&)> decode = [](RunConfig& c) -> DecodeConfig& { return c.decode; };
    std::vector<Entry> t;
    t.push_back({{"out_dir", "directory for generated files"},
                 [](const RunConfig& c) { return c.out_dir; },
                 [](RunConfig& c, std::string_view v) { c.out_dir = std::string(v); }});
    t.push_back(field("threads", "worker threads for decoding and evaluation", &RunConfig::threads));
    t.push_back(nested("data.scenes", "train split size", data, &DatasetConfig::scenes));
    t.push_back(field("data.eval_scenes", "eval split size", &RunConfig::eval_scenes));
    t.push_back(nested("data.max_objects", "objects per scene, upper bound", data, &DatasetConfig::max_objects));
    t.push_back(nested("data.negative_ratio", "target share of negative queries", data, &DatasetConfig::negative_ratio));
    t.push_back(nested("data.seed", "dataset seed", data, &DatasetConfig::seed));
    t.push_back(nested("data.grid", "cells per scene side (divides 1000)", scene, &SceneConfig::grid));
    t.push_back(nested("data.categories", "object categories in use", scene, &SceneConfig::num_categories));
    t.push_back(nested("data.max_side", "object side in cells, upper bound", scene, &SceneConfig::max_side));
    t.push_back(nested("model.d_model", "embedding width", model, &ModelConfig::d_model));
    t.push_back(nested("model.layers", "transformer layers", model, &ModelConfig::n_layers));
    t.push_back(nested("model.heads", "attention heads", model, &ModelConfig::n_heads));
    t.push_back(nested("model.d_ff", "feed-forward width", model, &ModelConfig::d_ff));
    t.push_back(nested("model.max_seq_len", "position table size", model, &ModelConfig::max_seq_len));
    t.push_back(field("model.init_seed", "weight initialisation seed", &RunConfig::init_seed));
    t.push_back(nested("train.steps", "optimizer steps (schedule length)", train, &TrainConfig::steps));
    t.push_back(nested("train.batch_tokens", "packing budget per step", train, &TrainConfig::batch_tokens));
    t.push_back(nested("train.buffer", "packer buffer capacity", train, &TrainConfig::buffer));
    t.push_back(nested("train.lr", "peak learning rate", train, &TrainConfig::lr));
    t.push_back(nested("train.warmup", "linear warmup steps", train, &TrainConfig::warmup));
    t.push_back(nested("train.min_lr_ratio", "final learning rate over peak", train, &TrainConfig::min_lr_ratio));
    t.push_back(nested("train.beta1", "Adam beta1", train, &TrainConfig::beta1));
    t.push_back(nested("train.beta2", "Adam beta2", train, &TrainConfig::beta2));
    t.push_back(nested("train.eps", "Adam epsilon", train, &TrainConfig::eps));
    t.push_back(nested("train.grad_clip", "global gradient norm clip, 0 disables", train, &TrainConfig::grad_clip));
    t.push_back(nested("train.weight_ntp", "loss weight of the token stream", weights, &LossWeights::ntp));
    t.push_back(nested("train.weight_mtp", "loss weight of the block stream", weights, &LossWeights::mtp));
    t.push_back(nested("train.seed", "packing order seed", train, &TrainConfig::seed));
    t.push_back(nested("train.log_every", "loss curve sampling interval", train, &TrainConfig::log_every));
    t.push_back({{"decode.mode", "slow, fast or hybrid"},
                 [](const RunConfig& c) { return std::string(to_string(c.decode.mode)); },
                 [](RunConfig& c, std::string_view v) { c.decode.mode = parse_decode_mode(v); }});
    t.push_back(nested("decode.temperature", "sampling temperature", decode, &DecodeConfig::temperature));
    t.push_back(nested("decode.top_p", "nucleus mass", decode, &DecodeConfig::top_p));
    t.push_back(nested("decode.repetition_penalty", "penalty on generated tokens", decode,
                       &DecodeConfig::repetition_penalty));
    t.push_back(nested("decode.n_future", "tokens per Fast step", decode, &DecodeConfig::n_future));
    t.push_back(nested("decode.max_new_tokens", "generation budget", decode, &DecodeConfig::max_new_tokens));
    t.push_back(nested("decode.trigger_prob", "ambiguity trigger: top-1 probability bound", decode,
                       &DecodeConfig::trigger_prob_threshold));
    t.push_back(nested("decode.trigger_spread", "ambiguity trigger: top-5 spread bound", decode,
                       &DecodeConfig::trigger_spread_threshold));
    t.push_back(nested("decode.greedy", "argmax instead of sampling", decode, &DecodeConfig::greedy));
    t.push_back(nested("decode.seed", "sampling seed", decode, &DecodeConfig::seed));
    return t;
  }();
  return table;
}

const Entry& find_entry(std::string_view key) {
  for (const auto& e : entries()) {
    if (e.key.name == key) return e;
  }
  throw ConfigError("unknown config key: " + std::string(key));
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() { model.vocab_size = Vocabulary::standard().size(); }

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (data.scenes < 0 || eval_scenes < 0 || data.max_objects < 0) throw ConfigError("dataset sizes must be >= 0");
  if (data.negative_ratio < 0.0 || data.negative_ratio > 1.0) throw ConfigError("negative_ratio must lie in [0, 1]");
  data.scene.validate();
  model.validate();
  if (model.vocab_size != Vocabulary::standard().size()) throw ConfigError("vocab_size is fixed by the vocabulary");
  if (train.steps < 1 || train.batch_tokens < 1 || train.buffer < 1) {
    throw ConfigError("train.steps, train.batch_tokens and train.buffer must be positive");
  }
  if (!(train.lr >= 0.0) || train.warmup < 0) throw ConfigError("train.lr and train.warmup must be >= 0");
  if (train.batch_tokens > model.max_seq_len) {
    throw ConfigError("train.batch_tokens (" + std::to_string(train.batch_tokens) + ") exceeds model.max_seq_len (" +
                      std::to_string(model.max_seq_len) + "): a packed batch is one sequence");
  }
  decode.validate();
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  find_entry(key).set(cfg, trim(value));
}

std::string get_config_value(const RunConfig& cfg, std::string_view key) { return find_entry(key).get(cfg); }

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view l = line;
    if (auto hash = l.find('#'); hash != std::string_view::npos) l = l.substr(0, hash);
    l = trim(l);
    if (l.empty()) continue;
    const auto eq = l.find('=');
    if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(base, trim(l.substr(0, eq)), l.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key.name + " = " + e.get(cfg) + "\n";
  return out;
}

bool operator==(const RunConfig& a, const RunConfig& b) { return serialize_config(a) == serialize_config(b); }

RunConfig reference_config() {
  RunConfig c;
  c.out_dir = "runs/reference";
  c.data.scene.grid = 4;
  c.train.steps = 2600;
  c.train.log_every = 100;
  c.decode.greedy = true;
  return c;
}

}  // namespace pbd
