// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pbd/codec.hpp"
#include "pbd/model.hpp"

namespace pbd {

enum class DecodeMode { Slow, Fast, Hybrid };
const char* to_string(DecodeMode m);
// Throws ConfigError for names other than slow, fast, hybrid.
DecodeMode parse_decode_mode(std::string_view name);

struct DecodeConfig {
  DecodeMode mode = DecodeMode::Fast;
  double temperature = 0.7;
  double top_p = 0.9;
  double repetition_penalty = 1.1;
  int n_future = 6;
  int max_new_tokens = 8192;
  double trigger_prob_threshold = 0.7;
  int trigger_spread_threshold = 80;
  bool greedy = false;
  std::uint64_t seed = 1;

  // Throws ConfigError.
  void validate() const;
};

enum class FallbackReason { FormatViolation, SpatialAmbiguity };
const char* to_string(FallbackReason r);

struct StepRecord {
  DecodeMode mode = DecodeMode::Slow;  // Slow for NTP steps, Fast for block steps
  std::size_t offset = 0;              // stream offset of the first token produced
  int tokens = 0;                      // tokens committed by this step
  int forward_passes = 0;
  std::optional<FallbackReason> fallback;
};

struct Fallback {
  std::size_t offset = 0;
  FallbackReason reason = FallbackReason::FormatViolation;
};

struct DecodeTrace {
  DecodeMode mode = DecodeMode::Slow;
  std::vector<TokenId> tokens;
  std::vector<StepRecord> steps;
  std::vector<Fallback> fallbacks;
  std::vector<std::size_t> flagged_blocks;  // Hybrid blocks still invalid after the NTP retry
  int forward_passes = 0;
  int boxes = 0;
  bool truncated = false;  // stopped by max_new_tokens or capacity before <end>
  double seconds = 0.0;
};

// Prompt = visual tokens followed by the query; the query must be nonempty.
struct Prompt {
  std::vector<TokenId> visual;
  std::vector<TokenId> query;
  std::vector<TokenId> tokens() const;
};

// Repetition penalty on tokens in `history`, then greedy argmax, or
// temperature and nucleus truncation followed by a draw from `rng`.
// [mask] is never returned.
TokenId sample_token(std::span<const double> logits, std::span<const TokenId> history, const DecodeConfig& config,
                     std::mt19937_64& rng);

// `coord_logits` covers the coordinate tokens 0..n-1 in order.
// Fires when the top-1 probability is below the threshold and the top-5
// coordinate values spread by more than the spread threshold.
// Throws ContractError for fewer than 5 coordinates.
bool ambiguity_trigger(std::span<const double> coord_logits, double prob_threshold = 0.7,
                       int spread_threshold = 80);

DecodeTrace decode_slow(const LogitModel& model, const Prompt& prompt, const DecodeConfig& config);
DecodeTrace decode_fast(const LogitModel& model, const Prompt& prompt, const DecodeConfig& config);
// Requires n_future == 6 so steps align with grammar blocks.
DecodeTrace decode_hybrid(const LogitModel& model, const Prompt& prompt, const DecodeConfig& config);
// Dispatches on config.mode.
DecodeTrace decode(const LogitModel& model, const Prompt& prompt, const DecodeConfig& config);

// Box blocks in a padded or natural stream, read up to the first malformed block.
std::vector<QuantBox> extract_boxes(const std::vector<TokenId>& tokens);

}  // namespace pbd
