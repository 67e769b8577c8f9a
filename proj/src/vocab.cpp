// SPDX-License-Identifier: Apache-2.0
#include "pbd/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "pbd/errors.hpp"

namespace pbd {
namespace {

constexpr const char* kStructuralSurfaces[] = {"<box>", "</box>", "<ref>", "</ref>",
                                               "<neg>", "<end>",  "<null>", "[mask]"};

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> category_words, std::vector<std::string> extra_words)
    : num_categories_(static_cast<int>(category_words.size())) {
  surfaces_.reserve(kNumCoordTokens + 8 + category_words.size() * 2 + extra_words.size() + 1);
  for (int v = 0; v <= kCoordMax; ++v) surfaces_.push_back("<" + std::to_string(v) + ">");
  for (const char* s : kStructuralSurfaces) surfaces_.emplace_back(s);

  text_.begin = static_cast<TokenId>(surfaces_.size());
  for (const auto& w : category_words) surfaces_.push_back(w);
  for (const auto& w : extra_words) surfaces_.push_back(w);
  text_.end = static_cast<TokenId>(surfaces_.size());

  visual_.begin = text_.end;
  surfaces_.emplace_back("[cell:empty]");
  for (const auto& w : category_words) surfaces_.push_back("[cell:" + w + "]");
  visual_.end = static_cast<TokenId>(surfaces_.size());
  size_ = visual_.end;

  for (TokenId id = 0; id < size_; ++id) {
    const auto& s = surfaces_[id];
    if (s.empty() || s.find_first_of(" \t\n") != std::string::npos) {
      throw ConfigError("vocabulary word must be non-empty without whitespace: '" + s + "'");
    }
    if (is_text(id) && (s.front() == '<' || s.front() == '[')) {
      throw ConfigError("text word may not look like a special token: " + s);
    }
    if (!index_.emplace(s, id).second) throw ConfigError("duplicate vocabulary entry: " + s);
  }
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab({"cat", "dog", "car", "cup"},
                                {"a", "the", "red", "blue", "green", "small", "large", "left",
                                 "right", "top", "bottom", "of"});
  return vocab;
}

TokenId Vocabulary::category_word(int category) const {
  if (category < 0 || category >= num_categories_) {
    throw DomainError("category out of range: " + std::to_string(category));
  }
  return text_.begin + category;
}

TokenId Vocabulary::visual_cell(int category) const {
  if (category < 0 || category >= num_categories_) {
    throw DomainError("category out of range: " + std::to_string(category));
  }
  return visual_.begin + 1 + category;
}

const std::string& Vocabulary::surface(TokenId t) const {
  if (!contains(t)) throw DomainError("token id out of range: " + std::to_string(t));
  return surfaces_[t];
}

TokenId Vocabulary::lookup(std::string_view surface) const {
  auto it = index_.find(std::string(surface));
  if (it == index_.end()) throw DomainError("unknown token: " + std::string(surface));
  return it->second;
}

void Vocabulary::export_table(std::ostream& out) const {
  for (TokenId id = 0; id < size_; ++id) out << id << '\t' << surfaces_[id] << '\n';
}

Vocabulary Vocabulary::import_table(std::istream& in) {
  std::vector<std::string> surfaces;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw IoError("vocabulary line without tab: " + line);
    long id = std::stol(line.substr(0, tab));
    if (id != static_cast<long>(surfaces.size())) {
      throw IoError("vocabulary ids must be dense and ordered; got " + std::to_string(id));
    }
    surfaces.push_back(line.substr(tab + 1));
  }
  // Recover the word lists from the fixed layout and rebuild, which re-checks
  // every invariant of the id table.
  const std::size_t fixed = kNumCoordTokens + 8;
  if (surfaces.size() < fixed + 1) throw IoError("vocabulary table too short");
  for (std::size_t i = 0; i < fixed; ++i) {
    const std::string expected =
        i <= static_cast<std::size_t>(kCoordMax) ? "<" + std::to_string(i) + ">"
                                                 : kStructuralSurfaces[i - kNumCoordTokens];
    if (surfaces[i] != expected) throw IoError("unexpected fixed token at id " + std::to_string(i));
  }
  auto empty_it = std::find(surfaces.begin() + fixed, surfaces.end(), "[cell:empty]");
  if (empty_it == surfaces.end()) throw IoError("vocabulary table lacks [cell:empty]");
  const auto n_text = static_cast<std::size_t>(empty_it - surfaces.begin()) - fixed;
  const auto n_cat = static_cast<std::size_t>(surfaces.end() - empty_it) - 1;
  if (n_cat > n_text) throw IoError("more visual categories than text words");
  std::vector<std::string> cats(surfaces.begin() + fixed, surfaces.begin() + fixed + n_cat);
  std::vector<std::string> extra(surfaces.begin() + fixed + n_cat, empty_it);
  Vocabulary v(std::move(cats), std::move(extra));
  if (v.surfaces_ != surfaces) throw IoError("vocabulary table is not in canonical layout");
  return v;
}

TokenId quantize_coord(double v) {
  // The scaled value is nudged by a few ulps so decimal ties such as 0.4235
  // (stored as 0.42349999...) still round up.
  double scaled = v * kCoordMax;
  double q = std::floor(scaled + 0.5 + 1e-9);
  if (q < 0) q = 0;
  if (q > kCoordMax) q = kCoordMax;
  return coord_token(static_cast<int>(q));
}

double dequantize_coord(TokenId t) {
  if (!is_coord(t)) throw DomainError("not a coordinate token: " + std::to_string(t));
  return static_cast<double>(t) / kCoordMax;
}

}  // namespace pbd
