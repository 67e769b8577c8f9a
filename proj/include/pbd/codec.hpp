// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pbd/vocab.hpp"

namespace pbd {

inline constexpr int kBlockSize = 6;

struct QuantBox {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  bool valid() const;
  auto operator<=>(const QuantBox&) const = default;
};

// Stable sort by top-left corner (x1, then y1).
std::vector<QuantBox> sort_boxes(std::vector<QuantBox> boxes);

enum class BlockKind { Semantic, Box, Negative, End };
const char* to_string(BlockKind k);

using Block = std::array<TokenId, kBlockSize>;

// Position in the output grammar, i.e. what the previous block left behind.
enum class GrammarState {
  Start,           // nothing emitted yet
  SemanticOpen,    // inside <ref> ... with </ref> still pending
  SemanticClosed,  // query closed, awaiting its Box or Negative blocks
  AfterBox,
  AfterNegative,
  Done,            // End seen
};

enum class FormatRule {
  WrongOpener,         // first token cannot open any block
  NonCoordinate,       // Box block slot that must hold a coordinate does not
  InteriorStructural,  // structural token where only content may appear
  NullBeforeNonNull,   // padding followed by real content
  KindNotPermitted,    // well-formed block that the grammar state forbids
  BoxNotClosed,        // Box block without </box> at its last slot
  InvertedBox,         // x1 > x2 or y1 > y2
  RefNotClosed,        // query padding starts before </ref>
  BadContent,          // token of the wrong class in a content slot
  UnknownToken,        // id outside the vocabulary
};
const char* to_string(FormatRule r);

struct FormatViolation {
  FormatRule rule;
  std::size_t offset = 0;    // stream offset of the offending block
  std::size_t position = 0;  // stream offset of the offending token
  std::string detail;
};

struct BlockCheck {
  BlockKind kind;
  GrammarState next;
};

// Classifies one block against the grammar state. `base_offset` is added to
// the in-block index reported by a violation.
// Throws ContractError unless tokens.size() == 6.
std::variant<BlockCheck, FormatViolation> validate_block(const std::vector<TokenId>& tokens,
                                                         GrammarState state,
                                                         const Vocabulary& vocab = Vocabulary::standard(),
                                                         std::size_t base_offset = 0);
std::variant<BlockCheck, FormatViolation> validate_block(const Block& block, GrammarState state,
                                                         const Vocabulary& vocab = Vocabulary::standard(),
                                                         std::size_t base_offset = 0);

using Query = std::vector<TokenId>;

struct AnswerGroup {
  Query query;
  std::vector<QuantBox> boxes;
  bool operator==(const AnswerGroup&) const = default;
};

struct ParsedAnswer {
  std::vector<AnswerGroup> groups;
  std::vector<Query> negatives;
  bool terminated = false;
  bool operator==(const ParsedAnswer&) const = default;
};

// Groups first (each query framed by <ref>...</ref>, then its boxes in
// corner order), then negatives, then one End block.
// Throws EncodeError for non-text query tokens, empty queries or invalid boxes.
std::vector<Block> encode_answer(const std::vector<AnswerGroup>& groups,
                                 const std::vector<Query>& negatives,
                                 const Vocabulary& vocab = Vocabulary::standard());

std::vector<TokenId> flatten(const std::vector<Block>& blocks);

enum class Framing {
  Auto,     // Blocks when the stream looks padded, Natural otherwise
  Blocks,   // consecutive 6-token blocks
  Natural,  // <null>-free stream, re-chunked at block openers
};

// Splits a stream into blocks paired with their stream offsets. A trailing
// chunk that cannot be a complete block is left out.
struct Chunk {
  std::size_t offset;
  std::vector<TokenId> tokens;
};
std::vector<Chunk> chunk_stream(const std::vector<TokenId>& tokens, Framing framing = Framing::Auto);

// Inverse of encode_answer. A trailing incomplete block is ignored and leaves
// `terminated` false; a query without boxes at the end of a truncated stream
// is dropped.
std::variant<ParsedAnswer, FormatViolation> parse_stream(const std::vector<TokenId>& tokens,
                                                         const Vocabulary& vocab = Vocabulary::standard(),
                                                         Framing framing = Framing::Auto);

// Removes <null> padding; the result parses under Framing::Natural.
std::vector<TokenId> strip_nulls(const std::vector<TokenId>& tokens);

// Surface syntax: "<ref>cat</ref><null>..." with text words separated by spaces.
std::string to_surface(const std::vector<TokenId>& tokens, const Vocabulary& vocab = Vocabulary::standard());
// Throws DomainError for unknown surface forms.
std::vector<TokenId> from_surface(std::string_view text, const Vocabulary& vocab = Vocabulary::standard());

}  // namespace pbd
