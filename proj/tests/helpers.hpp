#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "pbd/codec.hpp"
#include "pbd/model.hpp"
#include "pbd/sequence.hpp"

namespace pbd::testing {

inline ModelConfig small_config(int d = 16, int layers = 2, int heads = 2, int ff = 32, int max_len = 256) {
  return ModelConfig{Vocabulary::standard().size(), d, layers, heads, ff, max_len};
}

// A random but grammar-valid training example over the standard vocabulary.
inline TrainingExample random_example(std::mt19937_64& rng, int vis_len = 9, int block_size = kBlockSize) {
  const auto& v = Vocabulary::standard();
  std::uniform_int_distribution<int> cell(0, v.num_categories()), cat(0, v.num_categories() - 1), nb(0, 3),
      coord(0, 1000);
  std::vector<TokenId> vis(vis_len);
  for (auto& t : vis) t = cell(rng) == 0 ? v.visual_empty() : v.visual_cell(cat(rng));
  const TokenId q = v.category_word(cat(rng));
  std::vector<AnswerGroup> groups;
  std::vector<Query> negs;
  const int k = nb(rng);
  if (k == 0) {
    negs.push_back({q});
  } else {
    AnswerGroup g{{q}, {}};
    for (int i = 0; i < k; ++i) {
      int a = coord(rng), b = coord(rng), c = coord(rng), e = coord(rng);
      g.boxes.push_back({std::min(a, b), std::min(c, e), std::max(a, b), std::max(c, e)});
    }
    groups.push_back(g);
  }
  return assemble_training_example(vis, {q}, flatten(encode_answer(groups, negs)), block_size);
}

inline double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1.0});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace pbd::testing
