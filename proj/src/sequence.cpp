// SPDX-License-Identifier: Apache-2.0
#include "pbd/sequence.hpp"

#include <json.hpp>
#include <ostream>

#include "pbd/errors.hpp"

namespace pbd {

BlockExpansion expand_to_blocks(const std::vector<TokenId>& ntp, TokenId entry_anchor, int block_size) {
  if (block_size < 1) throw ContractError("block size must be positive");
  if (ntp.size() % static_cast<std::size_t>(block_size) != 0) {
    throw ContractError("stream length " + std::to_string(ntp.size()) + " is not a multiple of " +
                        std::to_string(block_size));
  }
  BlockExpansion out;
  out.inputs.reserve(ntp.size());
  out.targets = ntp;
  for (std::size_t start = 0; start < ntp.size(); start += block_size) {
    out.inputs.push_back(start == 0 ? entry_anchor : ntp[start - 1]);
    for (int s = 1; s < block_size; ++s) out.inputs.push_back(tok::kMask);
  }
  return out;
}

TrainingExample assemble_training_example(const std::vector<TokenId>& vis, const std::vector<TokenId>& query,
                                          const std::vector<TokenId>& answer, int block_size) {
  if (query.empty()) throw ContractError("query must not be empty");
  const auto& vocab = Vocabulary::standard();
  for (TokenId t : vis) {
    if (!vocab.is_visual(t)) throw ContractError("visual token outside the visual range");
  }
  auto blk = expand_to_blocks(answer, query.back(), block_size);

  TrainingExample ex;
  ex.layout = SequenceLayout{static_cast<int>(vis.size()), static_cast<int>(query.size()),
                             static_cast<int>(answer.size()), static_cast<int>(answer.size()), block_size};
  const int P = ex.layout.context_len();
  const int n = ex.layout.ntp_len;
  const auto total = static_cast<std::size_t>(ex.layout.total());
  ex.tokens.reserve(total);
  ex.tokens.insert(ex.tokens.end(), vis.begin(), vis.end());
  ex.tokens.insert(ex.tokens.end(), query.begin(), query.end());
  ex.tokens.insert(ex.tokens.end(), answer.begin(), answer.end());
  ex.tokens.insert(ex.tokens.end(), blk.inputs.begin(), blk.inputs.end());

  ex.positions.resize(total);
  for (int i = 0; i < P + n; ++i) ex.positions[i] = i;
  for (int k = 0; k < n; ++k) ex.positions[P + n + k] = P - 1 + k;

  ex.targets.assign(total, kIgnore);
  ex.streams.assign(total, LossStream::None);
  if (n > 0) {
    ex.targets[P - 1] = answer[0];
    ex.streams[P - 1] = LossStream::Ntp;
  }
  for (int i = 0; i + 1 < n; ++i) {
    ex.targets[P + i] = answer[i + 1];
    ex.streams[P + i] = LossStream::Ntp;
  }
  for (int k = 0; k < n; ++k) {
    ex.targets[P + n + k] = blk.targets[k];
    ex.streams[P + n + k] = LossStream::Mtp;
  }
  return ex;
}

TrainingExample assemble_training_example(const std::vector<TokenId>& vis, const std::vector<TokenId>& query,
                                          const std::vector<Block>& answer_blocks) {
  return assemble_training_example(vis, query, flatten(answer_blocks), kBlockSize);
}

PackedSequence pack_examples(const std::vector<const TrainingExample*>& examples) {
  PackedSequence p;
  for (const auto* ex : examples) {
    p.tokens.insert(p.tokens.end(), ex->tokens.begin(), ex->tokens.end());
    p.positions.insert(p.positions.end(), ex->positions.begin(), ex->positions.end());
    p.targets.insert(p.targets.end(), ex->targets.begin(), ex->targets.end());
    p.streams.insert(p.streams.end(), ex->streams.begin(), ex->streams.end());
    p.layout.samples.push_back(ex->layout);
  }
  return p;
}

PackedSequence pack_examples(const std::vector<TrainingExample>& examples) {
  std::vector<const TrainingExample*> ptrs;
  ptrs.reserve(examples.size());
  for (const auto& e : examples) ptrs.push_back(&e);
  return pack_examples(ptrs);
}

void write_example_record(std::ostream& out, const TrainingExample& ex) {
  nlohmann::json j;
  j["tokens"] = ex.tokens;
  j["positions"] = ex.positions;
  j["targets"] = ex.targets;
  std::vector<int> streams;
  for (auto s : ex.streams) streams.push_back(static_cast<int>(s));
  j["streams"] = streams;
  const auto& l = ex.layout;
  j["layout"] = {l.vis_len, l.q_len, l.ntp_len, l.blk_len, l.block_size};
  out << j.dump() << '\n';
}

TrainingExample read_example_record(const std::string& line) {
  try {
    auto j = nlohmann::json::parse(line);
    TrainingExample ex;
    ex.tokens = j.at("tokens").get<std::vector<TokenId>>();
    ex.positions = j.at("positions").get<std::vector<int>>();
    ex.targets = j.at("targets").get<std::vector<TokenId>>();
    for (int s : j.at("streams").get<std::vector<int>>()) {
      if (s < 0 || s > 2) throw IoError("bad loss stream tag");
      ex.streams.push_back(static_cast<LossStream>(s));
    }
    auto l = j.at("layout").get<std::vector<int>>();
    if (l.size() != 5) throw IoError("layout needs 5 entries");
    ex.layout = SequenceLayout{l[0], l[1], l[2], l[3], l[4]};
    ex.layout.validate();
    const auto n = static_cast<std::size_t>(ex.layout.total());
    if (ex.tokens.size() != n || ex.positions.size() != n || ex.targets.size() != n || ex.streams.size() != n) {
      throw IoError("record arrays disagree with layout");
    }
    return ex;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed example record: ") + e.what());
  } catch (const ContractError& e) {
    throw IoError(std::string("malformed example layout: ") + e.what());
  }
}

}  // namespace pbd
