// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "pbd/decode.hpp"
#include "pbd/model.hpp"
#include "pbd/scene.hpp"

namespace pbd {

// Settings shared by every subcommand. Files are flat "key = value" lines;
// '#' starts a comment. Unknown keys are errors.
struct RunConfig {
  std::string out_dir = "run";
  int threads = 1;

  DatasetConfig data;  // data.scenes is the train split size
  int eval_scenes = 500;

  ModelConfig model;  // vocab_size is fixed by the vocabulary
  std::uint64_t init_seed = 1;
  TrainConfig train;

  DecodeConfig decode;

  RunConfig();
  // Throws ConfigError.
  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string help;
};
const std::vector<ConfigKey>& config_keys();

// Throws ConfigError for unknown keys or unparsable values.
void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const RunConfig& cfg, std::string_view key);

// Throws ConfigError with the offending line number.
RunConfig parse_config(std::string_view text, RunConfig base = RunConfig());
// Throws IoError when unreadable, ConfigError when malformed.
RunConfig load_config(const std::string& path, RunConfig base = RunConfig());
// Every key, one per line, in config_keys() order; parses back to an equal config.
std::string serialize_config(const RunConfig& cfg);

bool operator==(const RunConfig& a, const RunConfig& b);

// Grid-4 scenes, the default model, and greedy decoding: the setup the
// acceptance run trains and scores. configs/reference.cfg holds the same values.
RunConfig reference_config();

}  // namespace pbd
