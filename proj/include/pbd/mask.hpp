// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace pbd {

// Segment lengths of one joint sequence vis ⊕ q ⊕ ntp ⊕ blk.
struct SequenceLayout {
  int vis_len = 0;
  int q_len = 0;
  int ntp_len = 0;
  int blk_len = 0;
  int block_size = 6;

  int total() const { return vis_len + q_len + ntp_len + blk_len; }
  int context_len() const { return vis_len + q_len; }
  int ntp_begin() const { return vis_len + q_len; }
  int blk_begin() const { return ntp_begin() + ntp_len; }
  int num_blocks() const { return block_size > 0 ? blk_len / block_size : 0; }
  // Absolute [start, end) of every block inside blk.
  std::vector<std::pair<int, int>> block_bounds() const;

  enum class Segment { Vis, Query, Ntp, Blk };
  Segment segment_of(int pos) const;

  // Throws ContractError when lengths are negative, blk does not tile into
  // blocks, blk is present without a query, or the block size is not positive.
  void validate() const;

  bool operator==(const SequenceLayout&) const = default;
};

// Several samples laid out back to back in one packed sequence.
struct PackedLayout {
  std::vector<SequenceLayout> samples;
  std::vector<int> sub_sample_lengths() const;
  int total() const;
};

// Boolean attention predicate over (query row, key column) pairs, stored
// densely. Row r is the query at absolute position row_offset + r.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(int rows, int cols, int row_offset = 0);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int row_offset() const { return row_offset_; }

  bool allowed(int q, int k) const { return data_[static_cast<std::size_t>(q) * cols_ + k] != 0; }
  void set(int q, int k, bool v = true) { data_[static_cast<std::size_t>(q) * cols_ + k] = v ? 1 : 0; }
  const std::uint8_t* row(int q) const { return data_.data() + static_cast<std::size_t>(q) * cols_; }

  // Rows [begin, end) against all columns; row_offset shifts accordingly.
  AttentionMask row_slice(int begin, int end) const;

  static AttentionMask causal(int n);

  // '#' allowed, '.' forbidden, one line per query row.
  std::string render_ascii() const;

  bool operator==(const AttentionMask&) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  int row_offset_ = 0;
  std::vector<std::uint8_t> data_;
};

// Three-regime training mask:
//  - vis ∪ q ∪ ntp is causal and never sees blk;
//  - a blk block sees the shared context, all earlier blocks and its own block
//    bidirectionally, and never sees ntp;
//  - the last query position is hidden from blk, because block 0's anchor is
//    a copy of it at the same position id.
AttentionMask build_training_mask(const SequenceLayout& layout);

// Block-diagonal composition; no attention crosses a sub-sample boundary.
AttentionMask build_training_mask(const PackedLayout& packed);

// Inference step over a committed prefix of `committed_len` entries followed by
// `n_future` block positions: the prefix is causal, the block sees the whole
// prefix and itself bidirectionally.
AttentionMask build_mtp_step_mask(int committed_len, int n_future);

// "v", "q", "n", "b" column legend matching render_ascii's columns.
std::string segment_legend(const SequenceLayout& layout);

}  // namespace pbd
