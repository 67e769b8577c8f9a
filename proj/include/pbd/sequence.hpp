// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "pbd/codec.hpp"
#include "pbd/mask.hpp"
#include "pbd/vocab.hpp"

namespace pbd {

inline constexpr TokenId kIgnore = -1;

enum class LossStream : std::int8_t { None = 0, Ntp = 1, Mtp = 2 };

// One joint sequence vis ⊕ q ⊕ ntp ⊕ blk. `positions` are the position ids fed
// to the model: ntp continues after the shared context, and slot s of block b
// reuses the id of the token it is conditioned on, P + L*b - 1 + s.
struct TrainingExample {
  std::vector<TokenId> tokens;
  std::vector<int> positions;
  std::vector<TokenId> targets;
  std::vector<LossStream> streams;
  SequenceLayout layout;

  int size() const { return static_cast<int>(tokens.size()); }
  bool operator==(const TrainingExample&) const = default;
};

struct BlockExpansion {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
};

// Block b's input is [anchor, [mask] x (L-1)] with targets equal to the L block
// tokens. The anchor is the token preceding the block: `entry_anchor` for the
// first block, the previous block's last token afterwards.
// Throws ContractError when the stream length is not a multiple of L.
BlockExpansion expand_to_blocks(const std::vector<TokenId>& ntp_tokens, TokenId entry_anchor,
                                int block_size = kBlockSize);

// Throws ContractError for an empty query, an answer whose length is not a
// multiple of the block size, or visual tokens outside the visual range.
TrainingExample assemble_training_example(const std::vector<TokenId>& vis, const std::vector<TokenId>& query,
                                          const std::vector<TokenId>& answer_stream, int block_size = kBlockSize);
TrainingExample assemble_training_example(const std::vector<TokenId>& vis, const std::vector<TokenId>& query,
                                          const std::vector<Block>& answer_blocks);

// Several examples concatenated into one packed training sequence.
struct PackedSequence {
  std::vector<TokenId> tokens;
  std::vector<int> positions;
  std::vector<TokenId> targets;
  std::vector<LossStream> streams;
  PackedLayout layout;

  int size() const { return static_cast<int>(tokens.size()); }
};

PackedSequence pack_examples(const std::vector<const TrainingExample*>& examples);
PackedSequence pack_examples(const std::vector<TrainingExample>& examples);

// One JSON object per line with integer arrays for every field and
// "layout": [vis, q, ntp, blk, block_size].
void write_example_record(std::ostream& out, const TrainingExample& ex);
// Throws IoError for malformed records.
TrainingExample read_example_record(const std::string& line);

}  // namespace pbd
