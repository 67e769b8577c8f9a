// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "pbd/codec.hpp"
#include "pbd/decode.hpp"

namespace pbd {

// Intersection over union; 0 when the union has no area.
double iou(const QuantBox& a, const QuantBox& b);

struct MatchCounts {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  MatchCounts& operator+=(const MatchCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const MatchCounts&) const = default;
};

// Greedy one-to-one matching in descending IoU order; a pair counts when its
// IoU is strictly above t. Throws ContractError unless 0 < t <= 1.
MatchCounts match_at_threshold(std::span<const QuantBox> preds, std::span<const QuantBox> gts, double t);

// 0.50, 0.55, ..., 0.95
const std::vector<double>& iou_thresholds();

// Counts per threshold of iou_thresholds(), summed over any number of queries.
struct MatchResult {
  std::vector<MatchCounts> counts = std::vector<MatchCounts>(10);
  void add(std::span<const QuantBox> preds, std::span<const QuantBox> gts);
};

struct F1Suite {
  double f1_50 = 0.0;
  double f1_95 = 0.0;
  double f1_mean = 0.0;
  double p_mean = 0.0;
  double r_mean = 0.0;
};

// F1 = 2PR / (P + R), 0 when P + R = 0; a threshold with no predictions and
// no ground truth scores P = R = F1 = 1.
double f1_score(const MatchCounts& c);
F1Suite f1_suite(const MatchResult& result);
F1Suite f1_suite(std::span<const QuantBox> preds, std::span<const QuantBox> gts);

// Boundary-inclusive containment.
bool point_hit(double x, double y, const QuantBox& gt);

struct ThroughputReport {
  int boxes = 0;
  double seconds = 0.0;
  int forward_passes = 0;
  double bps = 0.0;
  bool clamped = false;  // elapsed time was below clock resolution
};

ThroughputReport measure_bps(const DecodeTrace& trace);
ThroughputReport measure_bps(std::span<const DecodeTrace> traces);

}  // namespace pbd
