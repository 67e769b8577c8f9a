// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pbd {

using TokenId = std::int32_t;

inline constexpr int kCoordMax = 1000;
inline constexpr int kNumCoordTokens = kCoordMax + 1;

// Fixed id table. Coordinates occupy [0, 1000]; the eight structural tokens
// follow immediately; text and visual ranges come after and depend on the
// word lists a Vocabulary is built with.
namespace tok {
inline constexpr TokenId kBox = 1001;
inline constexpr TokenId kBoxEnd = 1002;
inline constexpr TokenId kRef = 1003;
inline constexpr TokenId kRefEnd = 1004;
inline constexpr TokenId kNeg = 1005;
inline constexpr TokenId kEnd = 1006;
inline constexpr TokenId kNull = 1007;
inline constexpr TokenId kMask = 1008;
inline constexpr TokenId kFirstStructural = kBox;
inline constexpr TokenId kLastStructural = kMask;
}  // namespace tok

inline constexpr bool is_coord(TokenId t) { return t >= 0 && t <= kCoordMax; }
inline constexpr bool is_structural(TokenId t) {
  return t >= tok::kFirstStructural && t <= tok::kLastStructural;
}
inline constexpr TokenId coord_token(int value) { return static_cast<TokenId>(value); }

// Half-open id interval.
struct TokenRange {
  TokenId begin = 0;
  TokenId end = 0;
  bool contains(TokenId t) const { return t >= begin && t < end; }
  int size() const { return end - begin; }
};

// Token space: coordinates, structural tokens, text words and visual cells.
//
// The first `num_categories` text words are category names; visual cells are
// "empty" followed by one cell token per category, in the same order.
class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> category_words, std::vector<std::string> extra_words);

  // 4 categories (cat, dog, car, cup) plus a handful of filler words.
  static const Vocabulary& standard();

  int size() const { return size_; }
  int num_categories() const { return num_categories_; }

  TokenRange coord_range() const { return {0, kNumCoordTokens}; }
  TokenRange structural_range() const { return {tok::kFirstStructural, tok::kLastStructural + 1}; }
  TokenRange text_range() const { return text_; }
  TokenRange visual_range() const { return visual_; }

  bool is_text(TokenId t) const { return text_.contains(t); }
  bool is_visual(TokenId t) const { return visual_.contains(t); }
  bool contains(TokenId t) const { return t >= 0 && t < size_; }

  TokenId category_word(int category) const;
  TokenId visual_empty() const { return visual_.begin; }
  TokenId visual_cell(int category) const;

  // Surface form such as "<box>", "<421>", "cat" or "[cell:dog]".
  const std::string& surface(TokenId t) const;
  // Throws DomainError for unknown surface forms.
  TokenId lookup(std::string_view surface) const;

  // Line-oriented "id<TAB>surface" table.
  void export_table(std::ostream& out) const;
  static Vocabulary import_table(std::istream& in);

  bool operator==(const Vocabulary& other) const { return surfaces_ == other.surfaces_; }

 private:
  int num_categories_ = 0;
  int size_ = 0;
  TokenRange text_;
  TokenRange visual_;
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, TokenId> index_;
};

// Round-half-up of v * 1000, clamped to [0, 1000].
TokenId quantize_coord(double v);

// value(t) / 1000. Throws DomainError for non-coordinate tokens.
double dequantize_coord(TokenId t);

}  // namespace pbd
