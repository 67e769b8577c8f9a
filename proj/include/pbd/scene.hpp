// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pbd/codec.hpp"
#include "pbd/sequence.hpp"

namespace pbd {

struct SceneConfig {
  int grid = 8;          // cells per side; must divide 1000
  int num_categories = 4;
  int max_side = 2;      // object side length in cells, 1..max_side
  // Throws ConfigError.
  void validate(const Vocabulary& vocab = Vocabulary::standard()) const;
};

struct SceneObject {
  int category = 0;
  QuantBox box;
  bool operator==(const SceneObject&) const = default;
};

struct QueryCase {
  Query query;
  std::vector<QuantBox> expected;  // corner-sorted, empty for negatives
  bool negative = false;
  bool operator==(const QueryCase&) const = default;
};

struct Scene {
  std::uint64_t seed = 0;
  int grid = 8;
  std::vector<SceneObject> objects;
  std::vector<QueryCase> queries;
  bool operator==(const Scene&) const = default;
};

// Objects are axis-aligned cell rectangles. Placement retries a bounded number
// of times and skips an object that keeps colliding: objects never share a cell,
// and same-category objects never touch (8-neighbourhood), since the cell
// encoding could not tell them apart from one larger object.
Scene generate_scene(std::uint64_t seed, int max_objects, const SceneConfig& cfg = {});

// Row-major, one token per cell: empty or the category occupying it.
std::vector<TokenId> scene_to_visual_tokens(const Scene& scene, const Vocabulary& vocab = Vocabulary::standard());

// One positive case per present category (ascending), then negatives for absent
// categories: round(r * positives / (1 - r)) of them, all absent ones when
// r = 1, and one for an empty scene when r > 0. The pick among absent
// categories is seeded by the scene.
std::vector<QueryCase> make_query_cases(const Scene& scene, double negative_ratio, const SceneConfig& cfg = {},
                                        const Vocabulary& vocab = Vocabulary::standard());

// The expected answer for one query, as encode_answer blocks.
std::vector<Block> expected_answer(const QueryCase& qc, const Vocabulary& vocab = Vocabulary::standard());

TrainingExample make_training_example(const Scene& scene, const QueryCase& qc, int block_size = kBlockSize,
                                      const Vocabulary& vocab = Vocabulary::standard());

struct DatasetConfig {
  int scenes = 10000;
  int max_objects = 5;
  double negative_ratio = 0.25;
  std::uint64_t seed = 1;
  SceneConfig scene;
};

// Seed of scene `index` in split `split` (0 train, 1 eval).
std::uint64_t scene_seed(std::uint64_t base, int split, int index);

// Scenes with their query cases filled in.
std::vector<Scene> generate_split(const DatasetConfig& cfg, int split);

void write_scene_record(std::ostream& out, const Scene& scene);
// Throws IoError for malformed records.
Scene read_scene_record(const std::string& line);
std::vector<Scene> read_scene_file(const std::string& path);
void write_scene_file(const std::string& path, const std::vector<Scene>& scenes);

}  // namespace pbd
