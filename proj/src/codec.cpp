// SPDX-License-Identifier: Apache-2.0
#include "pbd/codec.hpp"

#include <algorithm>
#include <cctype>

#include "pbd/errors.hpp"

namespace pbd {

bool QuantBox::valid() const {
  auto in = [](int v) { return v >= 0 && v <= kCoordMax; };
  return in(x1) && in(y1) && in(x2) && in(y2) && x1 <= x2 && y1 <= y2;
}

std::vector<QuantBox> sort_boxes(std::vector<QuantBox> boxes) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const QuantBox& a, const QuantBox& b) {
    return a.x1 != b.x1 ? a.x1 < b.x1 : a.y1 < b.y1;
  });
  return boxes;
}

const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::Semantic: return "semantic";
    case BlockKind::Box: return "box";
    case BlockKind::Negative: return "negative";
    case BlockKind::End: return "end";
  }
  return "?";
}

const char* to_string(FormatRule r) {
  switch (r) {
    case FormatRule::WrongOpener: return "wrong_opener";
    case FormatRule::NonCoordinate: return "non_coordinate";
    case FormatRule::InteriorStructural: return "interior_structural";
    case FormatRule::NullBeforeNonNull: return "null_before_non_null";
    case FormatRule::KindNotPermitted: return "kind_not_permitted";
    case FormatRule::BoxNotClosed: return "box_not_closed";
    case FormatRule::InvertedBox: return "inverted_box";
    case FormatRule::RefNotClosed: return "ref_not_closed";
    case FormatRule::BadContent: return "bad_content";
    case FormatRule::UnknownToken: return "unknown_token";
  }
  return "?";
}

namespace {

bool is_opener(TokenId t) {
  return t == tok::kRef || t == tok::kBox || t == tok::kNeg || t == tok::kEnd;
}

bool permitted(GrammarState s, BlockKind k, bool continuation) {
  switch (s) {
    case GrammarState::Start: return (k == BlockKind::Semantic && !continuation) || k == BlockKind::End;
    case GrammarState::SemanticOpen: return k == BlockKind::Semantic && continuation;
    case GrammarState::SemanticClosed: return k == BlockKind::Box || k == BlockKind::Negative;
    case GrammarState::AfterBox:
      return k == BlockKind::Box || (k == BlockKind::Semantic && !continuation) || k == BlockKind::End;
    case GrammarState::AfterNegative: return (k == BlockKind::Semantic && !continuation) || k == BlockKind::End;
    case GrammarState::Done: return false;
  }
  return false;
}

FormatViolation violation(FormatRule r, std::size_t base, std::size_t slot, std::string detail) {
  return FormatViolation{r, base, base + slot, std::move(detail)};
}

// Checks that slots [from, 6) hold only <null>.
std::optional<FormatViolation> expect_padding(const TokenId* t, int from, std::size_t base) {
  for (int i = from; i < kBlockSize; ++i) {
    if (t[i] == tok::kNull) continue;
    if (is_structural(t[i])) return violation(FormatRule::InteriorStructural, base, i, "structural token after opener");
    return violation(FormatRule::BadContent, base, i, "content where padding is required");
  }
  return std::nullopt;
}

}  // namespace

std::variant<BlockCheck, FormatViolation> validate_block(const Block& block, GrammarState state,
                                                         const Vocabulary& vocab, std::size_t base) {
  const TokenId* t = block.data();
  for (int i = 0; i < kBlockSize; ++i) {
    if (!vocab.contains(t[i])) return violation(FormatRule::UnknownToken, base, i, "id outside vocabulary");
  }

  BlockKind kind;
  bool continuation = false;
  std::optional<FormatViolation> bad;
  GrammarState next = state;
  const TokenId open = t[0];

  if (open == tok::kBox) {
    kind = BlockKind::Box;
    for (int i = 1; i <= 4 && !bad; ++i) {
      if (is_structural(t[i])) bad = violation(FormatRule::InteriorStructural, base, i, "structural token inside box");
      else if (!is_coord(t[i])) bad = violation(FormatRule::NonCoordinate, base, i, "box slot is not a coordinate");
    }
    if (!bad && t[5] != tok::kBoxEnd) bad = violation(FormatRule::BoxNotClosed, base, 5, "expected </box>");
    if (!bad && (t[1] > t[3] || t[2] > t[4])) bad = violation(FormatRule::InvertedBox, base, 1, "corner order");
    next = GrammarState::AfterBox;
  } else if (open == tok::kNeg || open == tok::kEnd || open == tok::kRef || open == tok::kRefEnd ||
             vocab.is_text(open)) {
    for (int j = 2; j < kBlockSize && !bad; ++j) {
      if (t[j - 1] == tok::kNull && t[j] != tok::kNull) {
        bad = violation(FormatRule::NullBeforeNonNull, base, j, "content after padding");
      }
    }
    if (open == tok::kNeg || open == tok::kEnd) {
      kind = open == tok::kNeg ? BlockKind::Negative : BlockKind::End;
      if (!bad) bad = expect_padding(t, 1, base);
      next = open == tok::kNeg ? GrammarState::AfterNegative : GrammarState::Done;
    } else {
      kind = BlockKind::Semantic;
      continuation = open != tok::kRef;
      int i = continuation ? 0 : 1;
      int words = 0;
      bool closed = false;
      for (; i < kBlockSize && !bad && !closed; ++i) {
        if (vocab.is_text(t[i])) {
          ++words;
        } else if (t[i] == tok::kRefEnd) {
          if (!continuation && words == 0) bad = violation(FormatRule::BadContent, base, i, "empty query");
          closed = true;
        } else if (t[i] == tok::kNull) {
          bad = violation(FormatRule::RefNotClosed, base, i, "padding before </ref>");
        } else if (is_structural(t[i])) {
          bad = violation(FormatRule::InteriorStructural, base, i, "structural token inside query");
        } else {
          bad = violation(FormatRule::BadContent, base, i, "query slot is not a text word");
        }
      }
      if (!bad && closed) bad = expect_padding(t, i, base);
      next = closed ? GrammarState::SemanticClosed : GrammarState::SemanticOpen;
    }
  } else {
    return violation(FormatRule::WrongOpener, base, 0, "token cannot open a block");
  }

  if (bad) return *bad;
  if (!permitted(state, kind, continuation)) {
    return violation(FormatRule::KindNotPermitted, base, 0, std::string(to_string(kind)) + " block not permitted here");
  }
  return BlockCheck{kind, next};
}

std::variant<BlockCheck, FormatViolation> validate_block(const std::vector<TokenId>& tokens, GrammarState state,
                                                         const Vocabulary& vocab, std::size_t base) {
  if (tokens.size() != kBlockSize) {
    throw ContractError("validate_block expects 6 tokens, got " + std::to_string(tokens.size()));
  }
  Block b;
  std::copy(tokens.begin(), tokens.end(), b.begin());
  return validate_block(b, state, vocab, base);
}

std::vector<Block> encode_answer(const std::vector<AnswerGroup>& groups, const std::vector<Query>& negatives,
                                 const Vocabulary& vocab) {
  std::vector<Block> out;
  auto emit_query = [&](const Query& q) {
    if (q.empty()) throw EncodeError("empty query");
    for (TokenId t : q) {
      if (!vocab.is_text(t)) throw EncodeError("query token is not a text word: " + std::to_string(t));
    }
    std::vector<TokenId> framed;
    framed.reserve(q.size() + 2);
    framed.push_back(tok::kRef);
    framed.insert(framed.end(), q.begin(), q.end());
    framed.push_back(tok::kRefEnd);
    for (std::size_t i = 0; i < framed.size(); i += kBlockSize) {
      Block b;
      b.fill(tok::kNull);
      std::copy(framed.begin() + i, framed.begin() + std::min(framed.size(), i + kBlockSize), b.begin());
      out.push_back(b);
    }
  };
  for (const auto& g : groups) {
    if (g.boxes.empty()) throw EncodeError("group without boxes; declare it as a negative instead");
    emit_query(g.query);
    for (const auto& box : sort_boxes(g.boxes)) {
      if (!box.valid()) throw EncodeError("invalid box");
      out.push_back({tok::kBox, coord_token(box.x1), coord_token(box.y1), coord_token(box.x2),
                     coord_token(box.y2), tok::kBoxEnd});
    }
  }
  for (const auto& q : negatives) {
    emit_query(q);
    out.push_back({tok::kNeg, tok::kNull, tok::kNull, tok::kNull, tok::kNull, tok::kNull});
  }
  out.push_back({tok::kEnd, tok::kNull, tok::kNull, tok::kNull, tok::kNull, tok::kNull});
  return out;
}

std::vector<TokenId> flatten(const std::vector<Block>& blocks) {
  std::vector<TokenId> out;
  out.reserve(blocks.size() * kBlockSize);
  for (const auto& b : blocks) out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::vector<TokenId> strip_nulls(const std::vector<TokenId>& tokens) {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  std::copy_if(tokens.begin(), tokens.end(), std::back_inserter(out), [](TokenId t) { return t != tok::kNull; });
  return out;
}

std::vector<Chunk> chunk_stream(const std::vector<TokenId>& tokens, Framing framing) {
  if (framing == Framing::Auto) {
    const bool whole = tokens.size() % kBlockSize == 0;
    const bool padded = std::find(tokens.begin(), tokens.end(), tok::kNull) != tokens.end();
    // Negative and End blocks always carry padding, so an unpadded stream
    // holding either is natural however it happens to align.
    bool aligned = std::none_of(tokens.begin(), tokens.end(),
                                [](TokenId t) { return t == tok::kNeg || t == tok::kEnd; });
    for (std::size_t i = 0; i < tokens.size(); i += kBlockSize) aligned = aligned && is_opener(tokens[i]);
    framing = padded || (whole && aligned) ? Framing::Blocks : Framing::Natural;
  }
  std::vector<Chunk> out;
  if (framing == Framing::Blocks) {
    for (std::size_t i = 0; i + kBlockSize <= tokens.size(); i += kBlockSize) {
      out.push_back({i, std::vector<TokenId>(tokens.begin() + i, tokens.begin() + i + kBlockSize)});
    }
    return out;
  }
  // Natural: a block ends at 6 tokens, at a block opener, after </ref> or after <neg>/<end>.
  std::size_t i = 0;
  while (i < tokens.size()) {
    Chunk c{i, {tokens[i]}};
    const TokenId open = tokens[i++];
    bool complete = false;
    if (open == tok::kNeg || open == tok::kEnd) {
      complete = true;
    } else if (open == tok::kBox) {
      while (i < tokens.size() && c.tokens.size() < kBlockSize) c.tokens.push_back(tokens[i++]);
      complete = c.tokens.size() == kBlockSize;
    } else {
      bool closed = open == tok::kRefEnd;
      while (!closed && i < tokens.size() && c.tokens.size() < kBlockSize && !is_opener(tokens[i])) {
        closed = tokens[i] == tok::kRefEnd;
        c.tokens.push_back(tokens[i++]);
      }
      // A chunk cut short by the end of the stream may still be continued.
      complete = closed || c.tokens.size() == kBlockSize || i < tokens.size();
    }
    if (!complete) break;
    c.tokens.resize(kBlockSize, tok::kNull);
    out.push_back(std::move(c));
  }
  return out;
}

std::variant<ParsedAnswer, FormatViolation> parse_stream(const std::vector<TokenId>& tokens, const Vocabulary& vocab,
                                                         Framing framing) {
  ParsedAnswer ans;
  GrammarState state = GrammarState::Start;
  Query pending;
  bool pending_has_group = false;
  for (const auto& chunk : chunk_stream(tokens, framing)) {
    auto r = validate_block(chunk.tokens, state, vocab, chunk.offset);
    if (auto* v = std::get_if<FormatViolation>(&r)) return *v;
    const auto check = std::get<BlockCheck>(r);
    const auto& t = chunk.tokens;
    switch (check.kind) {
      case BlockKind::Semantic: {
        if (state != GrammarState::SemanticOpen) {
          pending.clear();
          pending_has_group = false;
        }
        for (TokenId x : t) {
          if (vocab.is_text(x)) pending.push_back(x);
        }
        break;
      }
      case BlockKind::Box:
        if (!pending_has_group) {
          ans.groups.push_back({pending, {}});
          pending_has_group = true;
        }
        ans.groups.back().boxes.push_back({t[1], t[2], t[3], t[4]});
        break;
      case BlockKind::Negative: ans.negatives.push_back(pending); break;
      case BlockKind::End: ans.terminated = true; break;
    }
    state = check.next;
  }
  return ans;
}

std::string to_surface(const std::vector<TokenId>& tokens, const Vocabulary& vocab) {
  std::string out;
  bool prev_word = false;
  for (TokenId t : tokens) {
    const bool word = vocab.is_text(t);
    if (word && prev_word) out.push_back(' ');
    out += vocab.surface(t);
    prev_word = word;
  }
  return out;
}

std::vector<TokenId> from_surface(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    std::size_t j;
    if (c == '<' || c == '[') {
      const char close = c == '<' ? '>' : ']';
      j = text.find(close, i);
      if (j == std::string_view::npos) throw DomainError("unterminated token in surface text");
      ++j;
    } else {
      j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) && text[j] != '<' && text[j] != '[') ++j;
    }
    out.push_back(vocab.lookup(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

}  // namespace pbd
