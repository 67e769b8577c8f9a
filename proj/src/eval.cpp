// SPDX-License-Identifier: Apache-2.0
#include "pbd/eval.hpp"

#include <algorithm>
#include <chrono>
#include <tuple>

#include "pbd/errors.hpp"

namespace pbd {

double iou(const QuantBox& a, const QuantBox& b) {
  const long iw = std::max(0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const long ih = std::max(0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const long inter = iw * ih;
  const long area_a = static_cast<long>(a.x2 - a.x1) * (a.y2 - a.y1);
  const long area_b = static_cast<long>(b.x2 - b.x1) * (b.y2 - b.y1);
  const long uni = area_a + area_b - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

MatchCounts match_at_threshold(std::span<const QuantBox> preds, std::span<const QuantBox> gts, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw ContractError("IoU threshold must lie in (0, 1]");
  std::vector<std::tuple<double, int, int>> pairs;
  for (int i = 0; i < static_cast<int>(preds.size()); ++i) {
    for (int j = 0; j < static_cast<int>(gts.size()); ++j) {
      const double v = iou(preds[i], gts[j]);
      if (v > t) pairs.emplace_back(v, i, j);
    }
  }
  // Descending IoU; ties go to the earlier prediction, then the earlier truth.
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    return std::tie(std::get<1>(a), std::get<2>(a)) < std::tie(std::get<1>(b), std::get<2>(b));
  });
  std::vector<char> used_p(preds.size(), 0), used_g(gts.size(), 0);
  MatchCounts c;
  for (const auto& [v, i, j] : pairs) {
    if (used_p[i] || used_g[j]) continue;
    used_p[i] = used_g[j] = 1;
    ++c.tp;
  }
  c.fp = static_cast<int>(preds.size()) - c.tp;
  c.fn = static_cast<int>(gts.size()) - c.tp;
  return c;
}

const std::vector<double>& iou_thresholds() {
  static const std::vector<double> t = {0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  return t;
}

void MatchResult::add(std::span<const QuantBox> preds, std::span<const QuantBox> gts) {
  const auto& t = iou_thresholds();
  for (std::size_t k = 0; k < t.size(); ++k) counts[k] += match_at_threshold(preds, gts, t[k]);
}

namespace {

double precision(const MatchCounts& c) { return c.tp + c.fp == 0 ? (c.fn == 0 ? 1.0 : 0.0) : double(c.tp) / (c.tp + c.fp); }
double recall(const MatchCounts& c) { return c.tp + c.fn == 0 ? (c.fp == 0 ? 1.0 : 0.0) : double(c.tp) / (c.tp + c.fn); }

}  // namespace

double f1_score(const MatchCounts& c) {
  if (c.tp + c.fp + c.fn == 0) return 1.0;
  const double p = precision(c), r = recall(c);
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

F1Suite f1_suite(const MatchResult& result) {
  F1Suite s;
  const auto n = static_cast<double>(result.counts.size());
  for (const auto& c : result.counts) {
    s.f1_mean += f1_score(c);
    s.p_mean += precision(c);
    s.r_mean += recall(c);
  }
  s.f1_mean /= n;
  s.p_mean /= n;
  s.r_mean /= n;
  s.f1_50 = f1_score(result.counts.front());
  s.f1_95 = f1_score(result.counts.back());
  return s;
}

F1Suite f1_suite(std::span<const QuantBox> preds, std::span<const QuantBox> gts) {
  MatchResult r;
  r.add(preds, gts);
  return f1_suite(r);
}

bool point_hit(double x, double y, const QuantBox& gt) {
  return x >= gt.x1 && x <= gt.x2 && y >= gt.y1 && y <= gt.y2;
}

ThroughputReport measure_bps(std::span<const DecodeTrace> traces) {
  ThroughputReport r;
  for (const auto& t : traces) {
    r.boxes += static_cast<int>(extract_boxes(t.tokens).size());
    r.seconds += t.seconds;
    r.forward_passes += t.forward_passes;
  }
  using period = std::chrono::steady_clock::period;
  const double resolution = static_cast<double>(period::num) / period::den;
  if (r.seconds < resolution) {
    r.seconds = resolution;
    r.clamped = true;
  }
  r.bps = r.boxes / r.seconds;
  return r;
}

ThroughputReport measure_bps(const DecodeTrace& trace) { return measure_bps(std::span<const DecodeTrace>(&trace, 1)); }

}  // namespace pbd
