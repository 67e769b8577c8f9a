// SPDX-License-Identifier: Apache-2.0
#include "pbd/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>

#include "pbd/errors.hpp"

namespace pbd {
namespace {

constexpr int kPlacementTries = 50;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void SceneConfig::validate(const Vocabulary& vocab) const {
  if (grid <= 0 || kCoordMax % grid != 0) throw ConfigError("grid must divide 1000, got " + std::to_string(grid));
  if (num_categories <= 0 || num_categories > vocab.num_categories()) {
    throw ConfigError("num_categories must be in [1, " + std::to_string(vocab.num_categories()) + "]");
  }
  if (max_side <= 0 || max_side > grid) throw ConfigError("max_side must be in [1, grid]");
}

std::uint64_t scene_seed(std::uint64_t base, int split, int index) {
  return splitmix64(splitmix64(base) ^ (static_cast<std::uint64_t>(split) << 40) ^ static_cast<std::uint64_t>(index));
}

Scene generate_scene(std::uint64_t seed, int max_objects, const SceneConfig& cfg) {
  cfg.validate();
  if (max_objects < 0) throw ConfigError("max_objects must be non-negative");
  const int G = cfg.grid, unit = kCoordMax / G;
  std::mt19937_64 rng(seed);
  Scene scene;
  scene.seed = seed;
  scene.grid = G;
  std::vector<int> owner(G * G, -1);
  const int n = std::uniform_int_distribution<int>(0, max_objects)(rng);
  for (int k = 0; k < n; ++k) {
    for (int attempt = 0; attempt < kPlacementTries; ++attempt) {
      const int w = std::uniform_int_distribution<int>(1, cfg.max_side)(rng);
      const int h = std::uniform_int_distribution<int>(1, cfg.max_side)(rng);
      const int x = std::uniform_int_distribution<int>(0, G - w)(rng);
      const int y = std::uniform_int_distribution<int>(0, G - h)(rng);
      const int c = std::uniform_int_distribution<int>(0, cfg.num_categories - 1)(rng);
      bool clash = false;
      for (int cy = y - 1; cy <= y + h && !clash; ++cy) {
        for (int cx = x - 1; cx <= x + w && !clash; ++cx) {
          if (cx < 0 || cy < 0 || cx >= G || cy >= G) continue;
          const int o = owner[cy * G + cx];
          const bool inside = cx >= x && cx < x + w && cy >= y && cy < y + h;
          clash = o >= 0 && (inside || o == c);
        }
      }
      if (clash) continue;
      for (int cy = y; cy < y + h; ++cy)
        for (int cx = x; cx < x + w; ++cx) owner[cy * G + cx] = c;
      scene.objects.push_back({c, {x * unit, y * unit, (x + w) * unit, (y + h) * unit}});
      break;
    }
  }
  return scene;
}

std::vector<TokenId> scene_to_visual_tokens(const Scene& scene, const Vocabulary& vocab) {
  const int G = scene.grid;
  if (G <= 0 || kCoordMax % G != 0) throw ContractError("scene grid must divide 1000");
  const int unit = kCoordMax / G;
  std::vector<TokenId> out(static_cast<std::size_t>(G) * G, vocab.visual_empty());
  for (const auto& o : scene.objects) {
    for (int cy = o.box.y1 / unit; cy < o.box.y2 / unit; ++cy) {
      for (int cx = o.box.x1 / unit; cx < o.box.x2 / unit; ++cx) {
        TokenId& cell = out[static_cast<std::size_t>(cy) * G + cx];
        if (cell != vocab.visual_empty()) throw ContractError("objects overlap in a cell");
        cell = vocab.visual_cell(o.category);
      }
    }
  }
  return out;
}

std::vector<QueryCase> make_query_cases(const Scene& scene, double r, const SceneConfig& cfg, const Vocabulary& vocab) {
  if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("negative_ratio must lie in [0, 1]");
  std::vector<std::vector<QuantBox>> by_cat(cfg.num_categories);
  for (const auto& o : scene.objects) by_cat.at(o.category).push_back(o.box);
  std::vector<QueryCase> out;
  std::vector<int> absent;
  for (int c = 0; c < cfg.num_categories; ++c) {
    if (by_cat[c].empty()) {
      absent.push_back(c);
    } else {
      out.push_back({{vocab.category_word(c)}, sort_boxes(by_cat[c]), false});
    }
  }
  const int positives = static_cast<int>(out.size());
  int want = 0;
  if (r >= 1.0) {
    want = static_cast<int>(absent.size());
  } else if (r > 0.0) {
    want = positives == 0 ? 1 : static_cast<int>(std::lround(r * positives / (1.0 - r)));
  }
  want = std::min<int>(want, static_cast<int>(absent.size()));
  std::mt19937_64 rng(splitmix64(scene.seed ^ 0x6e6567ULL));
  std::shuffle(absent.begin(), absent.end(), rng);
  absent.resize(want);
  std::sort(absent.begin(), absent.end());
  for (int c : absent) out.push_back({{vocab.category_word(c)}, {}, true});
  return out;
}

std::vector<Block> expected_answer(const QueryCase& qc, const Vocabulary& vocab) {
  if (qc.negative) return encode_answer({}, {qc.query}, vocab);
  return encode_answer({{qc.query, qc.expected}}, {}, vocab);
}

TrainingExample make_training_example(const Scene& scene, const QueryCase& qc, int block_size, const Vocabulary& vocab) {
  return assemble_training_example(scene_to_visual_tokens(scene, vocab), qc.query,
                                   flatten(expected_answer(qc, vocab)), block_size);
}

std::vector<Scene> generate_split(const DatasetConfig& cfg, int split) {
  std::vector<Scene> out;
  out.reserve(cfg.scenes);
  for (int i = 0; i < cfg.scenes; ++i) {
    Scene s = generate_scene(scene_seed(cfg.seed, split, i), cfg.max_objects, cfg.scene);
    s.queries = make_query_cases(s, cfg.negative_ratio, cfg.scene);
    out.push_back(std::move(s));
  }
  return out;
}

void write_scene_record(std::ostream& out, const Scene& scene) {
  nlohmann::json j;
  j["seed"] = scene.seed;
  j["grid"] = scene.grid;
  j["objects"] = nlohmann::json::array();
  for (const auto& o : scene.objects) {
    j["objects"].push_back({{"cat", o.category}, {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}});
  }
  j["queries"] = nlohmann::json::array();
  for (const auto& q : scene.queries) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : q.expected) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    j["queries"].push_back({{"tokens", q.query}, {"expected", boxes}, {"negative", q.negative}});
  }
  out << j.dump() << '\n';
}

namespace {

QuantBox box_from_json(const nlohmann::json& j) {
  auto v = j.get<std::vector<int>>();
  if (v.size() != 4) throw IoError("box needs 4 coordinates");
  QuantBox b{v[0], v[1], v[2], v[3]};
  if (!b.valid()) throw IoError("invalid box in scene record");
  return b;
}

}  // namespace

Scene read_scene_record(const std::string& line) {
  try {
    auto j = nlohmann::json::parse(line);
    Scene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.grid = j.at("grid").get<int>();
    if (s.grid <= 0 || kCoordMax % s.grid != 0) throw IoError("grid must divide 1000");
    for (const auto& o : j.at("objects")) s.objects.push_back({o.at("cat").get<int>(), box_from_json(o.at("box"))});
    for (const auto& q : j.at("queries")) {
      QueryCase qc;
      qc.query = q.at("tokens").get<Query>();
      for (const auto& b : q.at("expected")) qc.expected.push_back(box_from_json(b));
      qc.negative = q.at("negative").get<bool>();
      if (qc.negative != qc.expected.empty()) throw IoError("negative flag disagrees with expected boxes");
      s.queries.push_back(std::move(qc));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed scene record: ") + e.what());
  }
}

std::vector<Scene> read_scene_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scene file: " + path);
  std::vector<Scene> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(read_scene_record(line));
    } catch (const IoError& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_scene_file(const std::string& path, const std::vector<Scene>& scenes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write scene file: " + path);
  for (const auto& s : scenes) write_scene_record(out, s);
  if (!out) throw IoError("failed writing scene file: " + path);
}

}  // namespace pbd
