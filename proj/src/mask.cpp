// SPDX-License-Identifier: Apache-2.0
#include "pbd/mask.hpp"

#include "pbd/errors.hpp"

namespace pbd {

std::vector<std::pair<int, int>> SequenceLayout::block_bounds() const {
  std::vector<std::pair<int, int>> out;
  for (int b = 0; b < num_blocks(); ++b) {
    const int s = blk_begin() + b * block_size;
    out.emplace_back(s, s + block_size);
  }
  return out;
}

SequenceLayout::Segment SequenceLayout::segment_of(int pos) const {
  if (pos < 0 || pos >= total()) throw ContractError("position outside layout: " + std::to_string(pos));
  if (pos < vis_len) return Segment::Vis;
  if (pos < ntp_begin()) return Segment::Query;
  if (pos < blk_begin()) return Segment::Ntp;
  return Segment::Blk;
}

void SequenceLayout::validate() const {
  if (vis_len < 0 || q_len < 0 || ntp_len < 0 || blk_len < 0) throw ContractError("negative segment length");
  if (block_size <= 0) throw ContractError("block size must be positive");
  if (blk_len % block_size != 0) throw ContractError("blk length is not a multiple of the block size");
  if (blk_len > 0 && q_len == 0) throw ContractError("blk stream requires a non-empty query");
}

std::vector<int> PackedLayout::sub_sample_lengths() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.total());
  return out;
}

int PackedLayout::total() const {
  int n = 0;
  for (const auto& s : samples) n += s.total();
  return n;
}

AttentionMask::AttentionMask(int rows, int cols, int row_offset)
    : rows_(rows), cols_(cols), row_offset_(row_offset), data_(static_cast<std::size_t>(rows) * cols, 0) {
  if (rows < 0 || cols < 0) throw ContractError("negative mask extent");
}

AttentionMask AttentionMask::row_slice(int begin, int end) const {
  if (begin < 0 || end > rows_ || begin > end) throw ContractError("row slice out of range");
  AttentionMask out(end - begin, cols_, row_offset_ + begin);
  std::copy(data_.begin() + static_cast<std::size_t>(begin) * cols_, data_.begin() + static_cast<std::size_t>(end) * cols_,
            out.data_.begin());
  return out;
}

AttentionMask AttentionMask::causal(int n) {
  AttentionMask m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m.set(i, j);
  return m;
}

std::string AttentionMask::render_ascii() const {
  std::string out;
  out.reserve(static_cast<std::size_t>(rows_) * (cols_ + 1));
  for (int i = 0; i < rows_; ++i) {
    for (int j = 0; j < cols_; ++j) out.push_back(allowed(i, j) ? '#' : '.');
    out.push_back('\n');
  }
  return out;
}

namespace {

void fill_training(AttentionMask& m, const SequenceLayout& l, int off) {
  const int shared_end = l.blk_begin();
  for (int i = 0; i < shared_end; ++i)
    for (int j = 0; j <= i; ++j) m.set(off + i, off + j);
  const int visible_ctx = l.context_len() - 1;
  for (int b = 0; b < l.num_blocks(); ++b) {
    const int start = l.blk_begin() + b * l.block_size;
    for (int i = start; i < start + l.block_size; ++i) {
      for (int j = 0; j < visible_ctx; ++j) m.set(off + i, off + j);
      for (int j = l.blk_begin(); j < start + l.block_size; ++j) m.set(off + i, off + j);
    }
  }
}

}  // namespace

AttentionMask build_training_mask(const SequenceLayout& layout) {
  layout.validate();
  AttentionMask m(layout.total(), layout.total());
  fill_training(m, layout, 0);
  return m;
}

AttentionMask build_training_mask(const PackedLayout& packed) {
  for (const auto& s : packed.samples) s.validate();
  const int n = packed.total();
  AttentionMask m(n, n);
  int off = 0;
  for (const auto& s : packed.samples) {
    fill_training(m, s, off);
    off += s.total();
  }
  return m;
}

AttentionMask build_mtp_step_mask(int committed_len, int n_future) {
  if (committed_len < 0 || n_future < 1) throw ContractError("invalid step mask extents");
  const int n = committed_len + n_future;
  AttentionMask m(n, n);
  for (int i = 0; i < committed_len; ++i)
    for (int j = 0; j <= i; ++j) m.set(i, j);
  for (int i = committed_len; i < n; ++i)
    for (int j = 0; j < n; ++j) m.set(i, j);
  return m;
}

std::string segment_legend(const SequenceLayout& l) {
  return std::string(l.vis_len, 'v') + std::string(l.q_len, 'q') + std::string(l.ntp_len, 'n') +
         std::string(l.blk_len, 'b');
}

}  // namespace pbd
