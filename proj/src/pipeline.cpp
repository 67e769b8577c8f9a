// SPDX-License-Identifier: Apache-2.0
#include "pbd/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "pbd/errors.hpp"

namespace pbd {

namespace {

// A Negative block before the first malformed block, and no Box block.
bool declares_negative(const std::vector<TokenId>& tokens) {
  GrammarState state = GrammarState::Start;
  bool negative = false;
  for (const auto& chunk : chunk_stream(tokens)) {
    auto res = validate_block(chunk.tokens, state);
    if (std::holds_alternative<FormatViolation>(res)) break;
    const auto& check = std::get<BlockCheck>(res);
    if (check.kind == BlockKind::Box) return false;
    if (check.kind == BlockKind::Negative) negative = true;
    state = check.next;
    if (state == GrammarState::Done) break;
  }
  return negative;
}

}  // namespace

std::vector<TrainingExample> training_examples(const std::vector<Scene>& scenes, int block_size) {
  std::vector<TrainingExample> out;
  for (const auto& s : scenes) {
    for (const auto& q : s.queries) out.push_back(make_training_example(s, q, block_size));
  }
  return out;
}

Prediction to_prediction(int scene, int query, const DecodeTrace& trace) {
  Prediction p;
  p.scene = scene;
  p.query = query;
  p.mode = trace.mode;
  p.tokens = trace.tokens;
  p.boxes = extract_boxes(trace.tokens);
  p.negative = declares_negative(trace.tokens);
  p.forward_passes = trace.forward_passes;
  p.steps = static_cast<int>(trace.steps.size());
  p.fallbacks = trace.fallbacks;
  p.flagged = static_cast<int>(trace.flagged_blocks.size());
  p.truncated = trace.truncated;
  p.seconds = trace.seconds;
  return p;
}

std::vector<Prediction> decode_scenes(const LogitModel& model, const std::vector<Scene>& scenes,
                                      const DecodeConfig& config, int threads, int limit) {
  if (threads < 1) throw ContractError("threads must be at least 1");
  const int n_scenes = limit < 0 ? static_cast<int>(scenes.size()) : std::min<int>(limit, scenes.size());
  std::vector<std::pair<int, int>> jobs;
  for (int s = 0; s < n_scenes; ++s)
    for (int q = 0; q < static_cast<int>(scenes[s].queries.size()); ++q) jobs.emplace_back(s, q);
  std::vector<std::vector<TokenId>> visual(n_scenes);
  for (int s = 0; s < n_scenes; ++s) visual[s] = scene_to_visual_tokens(scenes[s]);

  std::vector<Prediction> out(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      const auto [s, q] = jobs[i];
      DecodeConfig c = config;
      c.seed = config.seed + 1000ull * static_cast<std::uint64_t>(s) + static_cast<std::uint64_t>(q);
      try {
        out[i] = to_prediction(s, q, decode(model, Prompt{visual[s], scenes[s].queries[q].query}, c));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

double ModeSummary::passes_per_box() const {
  return throughput.boxes > 0 ? static_cast<double>(throughput.forward_passes) / throughput.boxes : 0.0;
}

ModeSummary summarize(const std::vector<Scene>& scenes, const std::vector<Prediction>& preds, int min_objects) {
  ModeSummary m;
  MatchResult match;
  if (!preds.empty()) m.mode = preds.front().mode;
  for (const auto& p : preds) {
    if (p.scene < 0 || p.scene >= static_cast<int>(scenes.size()) || p.query < 0 ||
        p.query >= static_cast<int>(scenes[p.scene].queries.size())) {
      throw ContractError("prediction refers to scene " + std::to_string(p.scene) + " query " +
                          std::to_string(p.query) + " outside the scene file");
    }
    const auto& scene = scenes[p.scene];
    if (static_cast<int>(scene.objects.size()) < min_objects) continue;
    const auto& qc = scene.queries[p.query];
    ++m.queries;
    match.add(p.boxes, qc.expected);
    m.throughput.boxes += static_cast<int>(p.boxes.size());
    m.throughput.forward_passes += p.forward_passes;
    m.throughput.seconds += p.seconds;
    m.steps += p.steps;
    m.fallbacks += static_cast<int>(p.fallbacks.size());
    m.flagged += p.flagged;
    m.truncated += p.truncated;
    if (qc.negative) {
      ++m.negatives;
      m.negatives_ok += p.negative && p.boxes.empty();
    }
  }
  m.f1 = f1_suite(match);
  using period = std::chrono::steady_clock::period;
  const double resolution = static_cast<double>(period::num) / period::den;
  if (m.throughput.seconds < resolution) {
    m.throughput.seconds = resolution;
    m.throughput.clamped = true;
  }
  m.throughput.bps = m.throughput.boxes / m.throughput.seconds;
  return m;
}

namespace {

nlohmann::json box_json(const QuantBox& b) { return {b.x1, b.y1, b.x2, b.y2}; }

}  // namespace

void write_prediction(std::ostream& out, const Prediction& p) {
  nlohmann::json j;
  j["scene"] = p.scene;
  j["query"] = p.query;
  j["mode"] = to_string(p.mode);
  j["tokens"] = p.tokens;
  j["boxes"] = nlohmann::json::array();
  for (const auto& b : p.boxes) j["boxes"].push_back(box_json(b));
  j["negative"] = p.negative;
  j["forward_passes"] = p.forward_passes;
  j["steps"] = p.steps;
  j["fallbacks"] = nlohmann::json::array();
  for (const auto& f : p.fallbacks) j["fallbacks"].push_back({{"offset", f.offset}, {"reason", to_string(f.reason)}});
  j["flagged"] = p.flagged;
  j["truncated"] = p.truncated;
  j["seconds"] = p.seconds;
  out << j.dump() << '\n';
}

Prediction read_prediction(const std::string& line) {
  try {
    auto j = nlohmann::json::parse(line);
    Prediction p;
    p.scene = j.at("scene").get<int>();
    p.query = j.at("query").get<int>();
    p.mode = parse_decode_mode(j.at("mode").get<std::string>());
    p.tokens = j.at("tokens").get<std::vector<TokenId>>();
    for (const auto& b : j.at("boxes")) {
      auto v = b.get<std::vector<int>>();
      if (v.size() != 4) throw IoError("box needs 4 coordinates");
      p.boxes.push_back({v[0], v[1], v[2], v[3]});
    }
    p.negative = j.at("negative").get<bool>();
    p.forward_passes = j.at("forward_passes").get<int>();
    p.steps = j.at("steps").get<int>();
    for (const auto& f : j.at("fallbacks")) {
      const auto reason = f.at("reason").get<std::string>();
      if (reason != "FormatViolation" && reason != "SpatialAmbiguity") throw IoError("unknown fallback reason " + reason);
      p.fallbacks.push_back({f.at("offset").get<std::size_t>(), reason == "FormatViolation"
                                                                    ? FallbackReason::FormatViolation
                                                                    : FallbackReason::SpatialAmbiguity});
    }
    p.flagged = j.at("flagged").get<int>();
    p.truncated = j.at("truncated").get<bool>();
    p.seconds = j.at("seconds").get<double>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed prediction record: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("malformed prediction record: ") + e.what());
  }
}

std::vector<Prediction> read_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open predictions file: " + path);
  std::vector<Prediction> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(read_prediction(line));
    } catch (const IoError& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_predictions(const std::string& path, const std::vector<Prediction>& preds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write predictions file: " + path);
  for (const auto& p : preds) write_prediction(out, p);
  if (!out) throw IoError("failed writing predictions file: " + path);
}

std::string trace_json(const std::vector<Prediction>& preds) {
  nlohmann::json j;
  int steps = 0, passes = 0, boxes = 0;
  double seconds = 0.0;
  j["fallbacks"] = nlohmann::json::array();
  for (const auto& p : preds) {
    steps += p.steps;
    passes += p.forward_passes;
    boxes += static_cast<int>(p.boxes.size());
    seconds += p.seconds;
    for (const auto& f : p.fallbacks) {
      j["fallbacks"].push_back(
          {{"scene", p.scene}, {"query", p.query}, {"offset", f.offset}, {"reason", to_string(f.reason)}});
    }
  }
  j["mode"] = preds.empty() ? "none" : to_string(preds.front().mode);
  j["steps"] = steps;
  j["forward_passes"] = passes;
  j["boxes"] = boxes;
  j["seconds"] = seconds;
  j["bps"] = seconds > 0.0 ? boxes / seconds : 0.0;
  return j.dump(2);
}

}  // namespace pbd
