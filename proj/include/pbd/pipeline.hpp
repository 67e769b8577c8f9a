// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pbd/decode.hpp"
#include "pbd/eval.hpp"
#include "pbd/scene.hpp"

namespace pbd {

// Every query of every scene, flattened in scene order.
std::vector<TrainingExample> training_examples(const std::vector<Scene>& scenes, int block_size = kBlockSize);

// Decoding output for one query, as stored in predictions files.
struct Prediction {
  int scene = 0;  // index in the scene file
  int query = 0;  // index in the scene's query list
  DecodeMode mode = DecodeMode::Slow;
  std::vector<TokenId> tokens;
  std::vector<QuantBox> boxes;
  bool negative = false;  // output declares the query absent
  int forward_passes = 0;
  int steps = 0;
  std::vector<Fallback> fallbacks;
  int flagged = 0;
  bool truncated = false;
  double seconds = 0.0;
};

Prediction to_prediction(int scene, int query, const DecodeTrace& trace);

// Decodes every query of the first `limit` scenes (all when negative) on
// `threads` workers. Query (s, q) samples with seed config.seed + 1000 * s + q,
// so results do not depend on the thread count.
std::vector<Prediction> decode_scenes(const LogitModel& model, const std::vector<Scene>& scenes,
                                      const DecodeConfig& config, int threads = 1, int limit = -1);

struct ModeSummary {
  DecodeMode mode = DecodeMode::Slow;
  int queries = 0;
  F1Suite f1;
  ThroughputReport throughput;
  int steps = 0;
  int fallbacks = 0;
  int flagged = 0;
  int truncated = 0;
  int negatives = 0;     // negative queries
  int negatives_ok = 0;  // of those, answered with a Negative block and no boxes
  double passes_per_box() const;
};

// Throws ContractError when a prediction points outside `scenes`.
// `min_objects` restricts to scenes with at least that many objects.
ModeSummary summarize(const std::vector<Scene>& scenes, const std::vector<Prediction>& preds, int min_objects = 0);

void write_prediction(std::ostream& out, const Prediction& p);
// Throws IoError.
Prediction read_prediction(const std::string& line);
std::vector<Prediction> read_predictions(const std::string& path);
void write_predictions(const std::string& path, const std::vector<Prediction>& preds);

// {mode, steps, forward_passes, fallbacks:[{scene, query, offset, reason}], boxes, seconds, bps}
std::string trace_json(const std::vector<Prediction>& preds);

}  // namespace pbd
