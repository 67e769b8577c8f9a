// SPDX-License-Identifier: Apache-2.0
#include "pbd/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "pbd/errors.hpp"

namespace pbd {

const char* to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::Slow: return "slow";
    case DecodeMode::Fast: return "fast";
    case DecodeMode::Hybrid: return "hybrid";
  }
  return "?";
}

DecodeMode parse_decode_mode(std::string_view name) {
  if (name == "slow") return DecodeMode::Slow;
  if (name == "fast") return DecodeMode::Fast;
  if (name == "hybrid") return DecodeMode::Hybrid;
  throw ConfigError("unknown decode mode: " + std::string(name));
}

const char* to_string(FallbackReason r) {
  return r == FallbackReason::FormatViolation ? "FormatViolation" : "SpatialAmbiguity";
}

void DecodeConfig::validate() const {
  if (!greedy && !(temperature > 0.0)) throw ConfigError("temperature must be positive unless greedy");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  if (!(repetition_penalty > 0.0)) throw ConfigError("repetition_penalty must be positive");
  if (n_future < 1) throw ConfigError("n_future must be at least 1");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be at least 1");
  if (!(trigger_prob_threshold > 0.0 && trigger_prob_threshold <= 1.0)) {
    throw ConfigError("trigger_prob_threshold must lie in (0, 1]");
  }
  if (trigger_spread_threshold < 0 || trigger_spread_threshold > kCoordMax) {
    throw ConfigError("trigger_spread_threshold must lie in [0, 1000]");
  }
}

std::vector<TokenId> Prompt::tokens() const {
  std::vector<TokenId> t = visual;
  t.insert(t.end(), query.begin(), query.end());
  return t;
}

TokenId sample_token(std::span<const double> logits, std::span<const TokenId> history, const DecodeConfig& config,
                     std::mt19937_64& rng) {
  const int n = static_cast<int>(logits.size());
  std::vector<double> z(logits.begin(), logits.end());
  std::vector<std::uint8_t> seen(n, 0);
  if (config.repetition_penalty != 1.0) {
    for (TokenId t : history) {
      if (t < 0 || t >= n || seen[t]) continue;
      seen[t] = 1;
      z[t] = z[t] > 0.0 ? z[t] / config.repetition_penalty : z[t] * config.repetition_penalty;
    }
  }
  if (tok::kMask < n) z[tok::kMask] = -std::numeric_limits<double>::infinity();

  if (config.greedy) return static_cast<TokenId>(std::max_element(z.begin(), z.end()) - z.begin());

  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(n);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp((z[i] - mx) / config.temperature);
    sum += p[i];
  }
  for (double& v : p) v /= sum;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
  double kept = 0.0;
  int k = 0;
  while (k < n && (k == 0 || kept < config.top_p)) kept += p[order[k++]];

  const double u = std::uniform_real_distribution<double>(0.0, kept)(rng);
  double acc = 0.0;
  for (int i = 0; i < k; ++i) {
    acc += p[order[i]];
    if (u < acc) return order[i];
  }
  return order[k - 1];
}

bool ambiguity_trigger(std::span<const double> coord_logits, double prob_threshold, int spread_threshold) {
  const int n = static_cast<int>(coord_logits.size());
  if (n < 5) throw ContractError("ambiguity trigger needs at least 5 coordinate logits");
  const double mx = *std::max_element(coord_logits.begin(), coord_logits.end());
  double sum = 0.0;
  for (double v : coord_logits) sum += std::exp(v - mx);
  const double top1 = 1.0 / sum;
  if (!(top1 < prob_threshold)) return false;

  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + 5, idx.end(), [&](int a, int b) {
    return coord_logits[a] > coord_logits[b] || (coord_logits[a] == coord_logits[b] && a < b);
  });
  const auto [lo, hi] = std::minmax_element(idx.begin(), idx.begin() + 5);
  return *hi - *lo > spread_threshold;
}

std::vector<QuantBox> extract_boxes(const std::vector<TokenId>& tokens) {
  std::vector<QuantBox> boxes;
  GrammarState state = GrammarState::Start;
  for (const auto& chunk : chunk_stream(tokens)) {
    auto res = validate_block(chunk.tokens, state);
    if (std::holds_alternative<FormatViolation>(res)) break;
    const auto& check = std::get<BlockCheck>(res);
    if (check.kind == BlockKind::Box) {
      boxes.push_back({chunk.tokens[1], chunk.tokens[2], chunk.tokens[3], chunk.tokens[4]});
    }
    state = check.next;
    if (state == GrammarState::Done) break;
  }
  return boxes;
}

namespace {

using Clock = std::chrono::steady_clock;

// Shared bookkeeping of one decode session.
class Session {
 public:
  Session(const LogitModel& model, const Prompt& prompt, const DecodeConfig& config, DecodeMode mode)
      : model_(model), cfg_(config), prompt_(prompt.tokens()), rng_(config.seed), start_(Clock::now()) {
    config.validate();
    if (prompt.query.empty()) throw ContractError("prompt needs a nonempty query");
    if (static_cast<int>(prompt_.size()) > model.max_seq_len()) {
      throw CapacityError("prompt of " + std::to_string(prompt_.size()) + " tokens exceeds max_seq_len");
    }
    trace_.mode = mode;
  }

  int P() const { return static_cast<int>(prompt_.size()); }
  const std::vector<TokenId>& out() const { return trace_.tokens; }
  int remaining() const { return cfg_.max_new_tokens - static_cast<int>(out().size()); }
  const DecodeConfig& config() const { return cfg_; }
  const LogitModel& model() const { return model_; }
  const std::vector<TokenId>& prompt() const { return prompt_; }
  DecodeTrace& trace() { return trace_; }

  TokenId sample(std::span<const double> logits, std::span<const TokenId> extra) {
    if (extra.empty()) return sample_token(logits, out(), cfg_, rng_);
    history_.assign(out().begin(), out().end());
    history_.insert(history_.end(), extra.begin(), extra.end());
    return sample_token(logits, history_, cfg_, rng_);
  }

  bool fits(const KVCache& cache, int n) const { return cache.length() + n <= model_.max_seq_len(); }

  // Appends tokens to the output. After <end> the block is completed with
  // <null> padding and the session is finished.
  void commit(std::span<const TokenId> tokens, StepRecord step) {
    step.offset = out().size();
    for (TokenId t : tokens) {
      trace_.tokens.push_back(t);
      ++step.tokens;
      if (t == tok::kEnd) {
        while (out().size() % kBlockSize != 0 && remaining() > 0) {
          trace_.tokens.push_back(tok::kNull);
          ++step.tokens;
        }
        if (out().size() % kBlockSize != 0) trace_.truncated = true;
        done_ = true;
        break;
      }
    }
    record(step);
  }

  void record(const StepRecord& step) {
    trace_.forward_passes += step.forward_passes;
    trace_.steps.push_back(step);
  }

  bool done() const { return done_; }
  void stop_truncated() {
    trace_.truncated = true;
    done_ = true;
  }
  void stop() { done_ = true; }

  DecodeTrace finish() {
    trace_.boxes = static_cast<int>(extract_boxes(trace_.tokens).size());
    trace_.seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    return std::move(trace_);
  }

 private:
  const LogitModel& model_;
  DecodeConfig cfg_;
  std::vector<TokenId> prompt_;
  std::mt19937_64 rng_;
  Clock::time_point start_;
  DecodeTrace trace_;
  std::vector<TokenId> history_;
  bool done_ = false;
};

std::vector<int> iota_positions(int from, int n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), from);
  return p;
}

// Token-by-token decoding on a causal cache holding prompt + output.
class NtpStream {
 public:
  explicit NtpStream(Session& s) : s_(s), cache_(s.model().new_cache()) {}
  explicit NtpStream(Session& s, KVCache cache) : s_(s), cache_(std::move(cache)) {}

  const KVCache& cache() const { return cache_; }

  // Feeds every stream token the cache has not seen and returns the logits
  // for the next one; with nothing pending, the last row is recomputed.
  // Returns nullopt when the cache is full.
  std::optional<std::vector<double>> sync() {
    std::vector<TokenId> stream = s_.prompt();
    stream.insert(stream.end(), s_.out().begin(), s_.out().end());
    if (cache_.length() >= static_cast<int>(stream.size())) cache_.truncate(static_cast<int>(stream.size()) - 1);
    const int from = cache_.length();
    return feed(std::span<const TokenId>(stream).subspan(from), from);
  }

  std::optional<std::vector<double>> feed(std::span<const TokenId> tokens, int first_position) {
    const int n = static_cast<int>(tokens.size());
    if (!s_.fits(cache_, n)) return std::nullopt;
    const int len = cache_.length();
    AttentionMask mask(n, len + n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= len + i; ++j) mask.set(i, j);
    const int last = n - 1;
    auto logits = s_.model().extend(cache_, tokens, iota_positions(first_position, n), mask,
                                    std::span<const int>(&last, 1));
    ++passes_;
    return logits;
  }

  // Samples up to `limit` tokens, feeding each back except the last. Stops
  // early after <end>. The first logits come from sync().
  std::vector<TokenId> generate(int limit, bool& capacity_hit) {
    std::vector<TokenId> produced;
    capacity_hit = false;
    auto logits = sync();
    for (int s = 0; s < limit; ++s) {
      if (!logits) {
        capacity_hit = true;
        break;
      }
      const TokenId t = s_.sample(*logits, produced);
      produced.push_back(t);
      if (t == tok::kEnd || s + 1 == limit) break;
      const int pos = s_.P() + static_cast<int>(s_.out().size() + produced.size()) - 1;
      logits = feed(std::span<const TokenId>(&produced.back(), 1), pos);
    }
    return produced;
  }

  int take_passes() { return std::exchange(passes_, 0); }

 private:
  Session& s_;
  KVCache cache_;
  int passes_ = 0;
};

// Block steps on a cache holding the prompt followed by every step's
// [anchor, mask...] rows. Step rows see the prompt except its last token,
// all earlier step rows and their own step.
class BlockStream {
 public:
  explicit BlockStream(Session& s) : s_(s), cache_(s.model().new_cache()) {}

  const KVCache& cache() const { return cache_; }

  // Predicts the next n tokens in one pass; logits are n x V, or nullopt when
  // the cache is full.
  std::optional<std::vector<double>> step(int n) {
    const int P = s_.P();
    const bool first = cache_.length() == 0;
    const int pre = first ? P : 0;
    if (!s_.fits(cache_, pre + n)) return std::nullopt;

    std::vector<TokenId> tokens;
    std::vector<int> positions;
    if (first) {
      tokens = s_.prompt();
      positions = iota_positions(0, P);
    }
    const int c = static_cast<int>(s_.out().size());
    tokens.push_back(c == 0 ? s_.prompt().back() : s_.out().back());
    for (int i = 1; i < n; ++i) tokens.push_back(tok::kMask);
    for (int i = 0; i < n; ++i) positions.push_back(P + c - 1 + i);

    const int len = cache_.length();
    const int rows = pre + n;
    AttentionMask mask(rows, len + rows);
    for (int i = 0; i < pre; ++i)
      for (int j = 0; j <= i; ++j) mask.set(i, j);
    for (int i = pre; i < rows; ++i) {
      for (int j = 0; j < P - 1; ++j) mask.set(i, j);
      for (int j = P; j < len + rows; ++j) mask.set(i, j);
    }
    std::vector<int> logit_rows = iota_positions(pre, n);
    return s_.model().extend(cache_, tokens, positions, mask, logit_rows);
  }

  KVCache prompt_cache() const {
    KVCache c = cache_;
    c.truncate(s_.P());
    return c;
  }

 private:
  Session& s_;
  KVCache cache_;
};

std::vector<TokenId> sample_rows(Session& s, const std::vector<double>& logits, int n) {
  const int V = s.model().vocab_size();
  std::vector<TokenId> tokens;
  for (int i = 0; i < n; ++i) {
    tokens.push_back(s.sample(std::span<const double>(logits).subspan(static_cast<std::size_t>(i) * V, V), tokens));
  }
  return tokens;
}

bool block_ambiguous(const Session& s, const std::vector<double>& logits) {
  const int V = s.model().vocab_size();
  const auto& cfg = s.config();
  for (int i = 1; i <= 4; ++i) {
    auto row = std::span<const double>(logits).subspan(static_cast<std::size_t>(i) * V, kNumCoordTokens);
    if (ambiguity_trigger(row, cfg.trigger_prob_threshold, cfg.trigger_spread_threshold)) return true;
  }
  return false;
}

}  // namespace

DecodeTrace decode_slow(const LogitModel& model, const Prompt& prompt, const DecodeConfig& config) {
  Session s(model, prompt, config, DecodeMode::Slow);
  NtpStream ntp(s);
  auto logits = ntp.feed(s.prompt(), 0);
  if (!logits) s.stop_truncated();
  while (!s.done()) {
    if (s.remaining() <= 0) {
      s.stop_truncated();
      break;
    }
    const TokenId t = s.sample(*logits, {});
    s.commit(std::span<const TokenId>(&t, 1), {DecodeMode::Slow, 0, 0, ntp.take_passes(), std::nullopt});
    if (s.done()) break;
    logits = ntp.feed(std::span<const TokenId>(&t, 1), s.P() + static_cast<int>(s.out().size()) - 1);
    if (!logits) s.stop_truncated();
  }
  return s.finish();
}

DecodeTrace decode_fast(const LogitModel& model, const Prompt& prompt, const DecodeConfig& config) {
  Session s(model, prompt, config, DecodeMode::Fast);
  BlockStream blocks(s);
  while (!s.done()) {
    const int n = std::min(config.n_future, s.remaining());
    if (n <= 0) {
      s.stop_truncated();
      break;
    }
    auto logits = blocks.step(n);
    if (!logits) {
      s.stop_truncated();
      break;
    }
    const auto tokens = sample_rows(s, *logits, n);
    s.commit(tokens, {DecodeMode::Fast, 0, 0, 1, std::nullopt});
  }
  return s.finish();
}

DecodeTrace decode_hybrid(const LogitModel& model, const Prompt& prompt, const DecodeConfig& config) {
  if (config.n_future != kBlockSize) throw ConfigError("hybrid decoding needs n_future equal to the block size");
  Session s(model, prompt, config, DecodeMode::Hybrid);
  BlockStream blocks(s);
  std::optional<NtpStream> ntp;
  GrammarState state = GrammarState::Start;

  while (!s.done()) {
    const int n = std::min(kBlockSize, s.remaining());
    if (n <= 0) {
      s.stop_truncated();
      break;
    }
    auto logits = blocks.step(n);
    if (!logits) {
      s.stop_truncated();
      break;
    }
    const auto tokens = sample_rows(s, *logits, n);
    if (n < kBlockSize) {
      s.commit(tokens, {DecodeMode::Fast, 0, 0, 1, std::nullopt});
      if (!s.done()) s.stop_truncated();
      break;
    }

    const std::size_t offset = s.out().size();
    auto check = validate_block(tokens, state, Vocabulary::standard(), offset);
    std::optional<FallbackReason> reason;
    if (std::holds_alternative<FormatViolation>(check)) {
      reason = FallbackReason::FormatViolation;
    } else if (std::get<BlockCheck>(check).kind == BlockKind::Box && block_ambiguous(s, *logits)) {
      reason = FallbackReason::SpatialAmbiguity;
    }
    if (!reason) {
      state = std::get<BlockCheck>(check).next;
      s.commit(tokens, {DecodeMode::Fast, 0, 0, 1, std::nullopt});
      continue;
    }

    s.record({DecodeMode::Fast, offset, 0, 1, reason});
    s.trace().fallbacks.push_back({offset, *reason});
    if (!ntp) ntp.emplace(s, blocks.prompt_cache());
    bool capacity_hit = false;
    const auto retry = ntp->generate(kBlockSize, capacity_hit);
    auto padded = retry;
    padded.resize(kBlockSize, tok::kNull);
    const auto recheck = validate_block(padded, state, Vocabulary::standard(), offset);
    s.commit(retry, {DecodeMode::Slow, 0, 0, ntp->take_passes(), std::nullopt});
    if (capacity_hit || (static_cast<int>(retry.size()) < kBlockSize && !s.done())) {
      s.stop_truncated();
      break;
    }
    if (std::holds_alternative<FormatViolation>(recheck)) {
      s.trace().flagged_blocks.push_back(offset);
      s.stop();
      break;
    }
    state = std::get<BlockCheck>(recheck).next;
  }
  return s.finish();
}

DecodeTrace decode(const LogitModel& model, const Prompt& prompt, const DecodeConfig& config) {
  switch (config.mode) {
    case DecodeMode::Slow: return decode_slow(model, prompt, config);
    case DecodeMode::Fast: return decode_fast(model, prompt, config);
    case DecodeMode::Hybrid: return decode_hybrid(model, prompt, config);
  }
  throw ContractError("unknown decode mode");
}

}  // namespace pbd
