// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pbd/mask.hpp"
#include "pbd/sequence.hpp"
#include "pbd/vocab.hpp"

namespace pbd {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 1024;

  // Throws ConfigError.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Named view into the flat parameter vector; matrices are row-major rows x cols.
struct ParamGroup {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

class ModelParams {
 public:
  explicit ModelParams(const ModelConfig& config);  // all zeros

  // Embeddings ~ N(0, 1), matrices ~ U(+-1/sqrt(fan_in)), layer-norm gains 1,
  // biases 0. Small embeddings stall training on the grid task.
  static ModelParams initialized(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }
  // Throws ContractError for unknown names.
  const ParamGroup& group(std::string_view name) const;
  double* data(const ParamGroup& g) { return values_.data() + g.offset; }
  const double* data(const ParamGroup& g) const { return values_.data() + g.offset; }

  bool all_finite() const;

 private:
  ModelConfig config_;
  std::vector<ParamGroup> groups_;
  std::vector<double> values_;
};

// Keys and values of every layer for the rows fed so far, with a journal of
// what produced them (token, position id, visible keys) so any state can be
// recomputed from scratch.
class KVCache {
 public:
  explicit KVCache(const ModelConfig& config);

  int length() const { return static_cast<int>(tokens_.size()); }
  void truncate(int length);
  void clear() { truncate(0); }

  const std::vector<TokenId>& tokens() const { return tokens_; }
  const std::vector<int>& positions() const { return positions_; }
  // Full mask over the cached rows, rebuilt from the journal.
  AttentionMask journal_mask() const;

  // Layer-major storage, length x d_model per layer.
  std::vector<std::vector<double>>& keys() { return keys_; }
  std::vector<std::vector<double>>& values() { return values_; }
  const std::vector<std::vector<double>>& keys() const { return keys_; }
  const std::vector<std::vector<double>>& values() const { return values_; }

  void append_journal(TokenId token, int position, std::vector<std::uint8_t> visible);

 private:
  int d_model_;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
  std::vector<TokenId> tokens_;
  std::vector<int> positions_;
  std::vector<std::vector<std::uint8_t>> visible_;
};

// What the decoders need from a model; tests substitute scripted stubs.
class LogitModel {
 public:
  virtual ~LogitModel() = default;
  virtual int vocab_size() const = 0;
  virtual int max_seq_len() const = 0;
  virtual KVCache new_cache() const = 0;
  // Feeds `tokens` as new rows after the cache. `mask` has one row per new token
  // and cache.length() + tokens.size() columns. The new keys/values are appended
  // to the cache; the caller truncates what it does not commit. Returns logits
  // for the new rows listed in `logit_rows`, row-major.
  // Throws CapacityError when the cache would exceed max_seq_len.
  virtual std::vector<double> extend(KVCache& cache, std::span<const TokenId> tokens,
                                     std::span<const int> positions, const AttentionMask& mask,
                                     std::span<const int> logit_rows) const = 0;
};

struct LossWeights {
  double ntp = 1.0;
  double mtp = 1.0;
};

// Per-stream mean cross-entropy, summed over the sub-samples of a pack.
struct LossReport {
  double l_ntp = 0.0;
  double l_mtp = 0.0;
  double l_total = 0.0;
  int ntp_tokens = 0;
  int mtp_tokens = 0;
  int samples = 0;
};

// Cross-entropy of full logits (size x vocab) against an example's targets.
// A stream without targets contributes 0.
LossReport loss_joint(std::span<const double> logits, int vocab_size, const TrainingExample& example,
                      const LossWeights& weights = {});

class TransformerModel final : public LogitModel {
 public:
  explicit TransformerModel(ModelParams params);

  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }
  const ModelConfig& config() const { return params_.config(); }

  int vocab_size() const override { return config().vocab_size; }
  int max_seq_len() const override { return config().max_seq_len; }
  KVCache new_cache() const override { return KVCache(config()); }
  std::vector<double> extend(KVCache& cache, std::span<const TokenId> tokens, std::span<const int> positions,
                             const AttentionMask& mask, std::span<const int> logit_rows) const override;

  // Logits for every row (size x vocab). Position ids default to 0..n-1.
  std::vector<double> forward(std::span<const TokenId> tokens, std::span<const int> positions,
                              const AttentionMask& mask) const;
  std::vector<double> forward(const TrainingExample& ex) const;

  LossReport loss(const PackedSequence& batch, const LossWeights& weights = {}) const;
  // Loss plus its analytic gradient, written into `grad` (resized to the
  // parameter count and overwritten).
  LossReport loss_and_grad(const PackedSequence& batch, std::vector<double>& grad,
                           const LossWeights& weights = {}) const;

 private:
  ModelParams params_;
};

struct TrainConfig {
  int steps = 3000;    // schedule length
  int stop_at = -1;    // end this call early at this step; -1 runs to `steps`
  int batch_tokens = 1024;  // packing budget per optimizer step
  int buffer = 32;
  double lr = 3e-3;
  int warmup = 100;
  double min_lr_ratio = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global norm; 0 disables
  LossWeights weights;
  std::uint64_t seed = 1;
  int log_every = 50;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  int step = 0;
  bool operator==(const AdamState&) const = default;
};

struct LossPoint {
  int step = 0;
  double lr = 0.0;
  double l_ntp = 0.0;
  double l_mtp = 0.0;
  double l_total = 0.0;
};

// Learning rate at `step` (0-based): linear warmup, then cosine decay.
double learning_rate(const TrainConfig& cfg, int step);

// Trains in place, continuing from `state.step` up to cfg.steps. Batches are
// packed from `dataset` with the stream packer; the per-step loss is the mean
// over the packed samples. Deterministic for a fixed seed and dataset.
// Throws ContractError for an empty dataset or an example longer than
// batch_tokens, DivergenceError on a non-finite loss.
std::vector<LossPoint> train(TransformerModel& model, AdamState& state, const std::vector<TrainingExample>& dataset,
                             const TrainConfig& cfg);

void write_loss_csv(std::ostream& out, const std::vector<LossPoint>& curve);

// Binary checkpoint: magic, format version, dimensions, optimizer step and
// moments, then the flat weights. Throws IoError.
void save_checkpoint(const std::string& path, const ModelParams& params, const AdamState& state);
ModelParams load_checkpoint(const std::string& path, AdamState* state = nullptr);

}  // namespace pbd
