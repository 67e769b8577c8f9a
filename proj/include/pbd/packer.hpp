// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pbd/errors.hpp"

namespace pbd {

template <class Item>
struct PackedBatch {
  std::vector<Item> items;
  std::vector<int> lengths;  // sub-sample lengths, in insertion order
  int budget = 0;

  int tokens() const { return std::accumulate(lengths.begin(), lengths.end(), 0); }
};

struct PackerStats {
  long long packed_tokens = 0;
  long long capacity_tokens = 0;
  long long ingested = 0;
  long long emitted = 0;
  int batches = 0;
  int max_buffer = 0;
  int forced_emissions = 0;  // batches closed because the buffer was full
};

// Online packer: weighted draws from several sources, a best-fit buffer, and
// big-rocks-first seeding of each new batch.
//
// Assembly of one batch: take the largest buffered item that fits the remaining
// budget until none fits, then draw. A draw that fits is appended; one that
// does not is buffered. A draw that fits neither closes the batch, and the
// next batch is seeded with the largest of the buffer and that draw. When all
// sources are exhausted the buffer drains big-rocks-first.
template <class Item>
class StreamPacker {
 public:
  using Source = std::function<std::optional<Item>()>;
  using LengthFn = std::function<int(const Item&)>;

  StreamPacker(std::vector<Source> sources, std::vector<double> weights, LengthFn length, int budget,
               int buffer_capacity = 32, std::uint64_t seed = 0)
      : sources_(std::move(sources)),
        weights_(std::move(weights)),
        length_(std::move(length)),
        budget_(budget),
        capacity_(buffer_capacity),
        rng_(seed),
        live_(sources_.size(), true) {
    if (sources_.empty() || sources_.size() != weights_.size()) throw ContractError("one weight per source required");
    for (double w : weights_) {
      if (!(w > 0.0)) throw ContractError("source weights must be positive");
    }
    if (budget_ <= 0 || capacity_ <= 0) throw ContractError("budget and buffer capacity must be positive");
  }

  // Next batch, or nullopt once the sources and the buffer are exhausted.
  // Throws DomainError when a drawn item is longer than the budget.
  std::optional<PackedBatch<Item>> next() {
    PackedBatch<Item> batch;
    batch.budget = budget_;
    int remaining = budget_;
    auto add = [&](Entry e) {
      remaining -= e.length;
      batch.lengths.push_back(e.length);
      batch.items.push_back(std::move(e.item));
    };

    // Seed with the largest pending item; a carried draw takes the slot the
    // seed frees, so the buffer never exceeds its capacity.
    if (carry_) {
      const std::size_t i = largest_fitting(budget_);
      if (i == npos || carry_->length >= buffer_[i].length) {
        add(std::move(*carry_));
      } else {
        add(take(i));
        buffer_.push_back(std::move(*carry_));
      }
      carry_.reset();
    } else if (!buffer_.empty()) {
      add(take(largest_fitting(budget_)));
    }

    while (remaining > 0) {
      if (auto i = largest_fitting(remaining); i != npos) {
        add(take(i));
        continue;
      }
      auto drawn = draw();
      if (!drawn) break;
      if (drawn->length <= remaining) {
        add(std::move(*drawn));
      } else if (static_cast<int>(buffer_.size()) < capacity_) {
        buffer_.push_back(std::move(*drawn));
        stats_.max_buffer = std::max<int>(stats_.max_buffer, static_cast<int>(buffer_.size()));
      } else {
        carry_ = std::move(*drawn);
        ++stats_.forced_emissions;
        break;
      }
    }
    if (batch.items.empty()) return std::nullopt;
    stats_.packed_tokens += batch.tokens();
    stats_.capacity_tokens += budget_;
    stats_.emitted += static_cast<long long>(batch.items.size());
    ++stats_.batches;
    return batch;
  }

  int buffer_size() const { return static_cast<int>(buffer_.size()); }
  int buffer_capacity() const { return capacity_; }
  const PackerStats& stats() const { return stats_; }

 private:
  struct Entry {
    Item item;
    int length;
  };
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  // Earliest-buffered among equal lengths, so draining is deterministic.
  std::size_t largest_fitting(int room) const {
    std::size_t best = npos;
    for (std::size_t i = 0; i < buffer_.size(); ++i) {
      if (buffer_[i].length <= room && (best == npos || buffer_[i].length > buffer_[best].length)) best = i;
    }
    return best;
  }

  Entry take(std::size_t i) {
    Entry e = std::move(buffer_[i]);
    buffer_.erase(buffer_.begin() + static_cast<std::ptrdiff_t>(i));
    return e;
  }

  std::optional<Entry> draw() {
    while (true) {
      double total = 0.0;
      for (std::size_t s = 0; s < sources_.size(); ++s) total += live_[s] ? weights_[s] : 0.0;
      if (total <= 0.0) return std::nullopt;
      double u = std::uniform_real_distribution<double>(0.0, total)(rng_);
      std::size_t pick = 0;
      for (std::size_t s = 0; s < sources_.size(); ++s) {
        if (!live_[s]) continue;
        pick = s;
        if (u < weights_[s]) break;
        u -= weights_[s];
      }
      auto item = sources_[pick]();
      if (!item) {
        live_[pick] = false;
        continue;
      }
      const int len = length_(*item);
      ++stats_.ingested;
      if (len > budget_ || len <= 0) {
        throw DomainError("example #" + std::to_string(stats_.ingested - 1) + " from source " + std::to_string(pick) +
                          " has length " + std::to_string(len) + ", outside (0, " + std::to_string(budget_) + "]");
      }
      return Entry{std::move(*item), len};
    }
  }

  std::vector<Source> sources_;
  std::vector<double> weights_;
  LengthFn length_;
  int budget_;
  int capacity_;
  std::mt19937_64 rng_;
  std::vector<bool> live_;
  std::vector<Entry> buffer_;
  std::optional<Entry> carry_;
  PackerStats stats_;
};

// Packed tokens over total capacity. Throws ContractError for an empty list.
template <class Item>
double packing_efficiency(const std::vector<PackedBatch<Item>>& batches) {
  if (batches.empty()) throw ContractError("packing efficiency of no batches");
  double packed = 0.0, capacity = 0.0;
  for (const auto& b : batches) {
    packed += b.tokens();
    capacity += b.budget;
  }
  return packed / capacity;
}

// Endless source over indices [0, n): each pass is a fresh shuffle.
inline std::function<std::optional<std::size_t>()> shuffled_cycle(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ContractError("cannot cycle over an empty set");
  struct State {
    std::vector<std::size_t> order;
    std::size_t at;
    std::mt19937_64 rng;
  };
  auto st = std::make_shared<State>(State{std::vector<std::size_t>(n), n, std::mt19937_64(seed)});
  std::iota(st->order.begin(), st->order.end(), std::size_t{0});
  return [st]() -> std::optional<std::size_t> {
    if (st->at == st->order.size()) {
      std::shuffle(st->order.begin(), st->order.end(), st->rng);
      st->at = 0;
    }
    return st->order[st->at++];
  };
}

// Finite source over a list of items, in order.
template <class Item>
std::function<std::optional<Item>()> list_source(std::vector<Item> items) {
  auto data = std::make_shared<std::vector<Item>>(std::move(items));
  auto at = std::make_shared<std::size_t>(0);
  return [data, at]() -> std::optional<Item> {
    if (*at >= data->size()) return std::nullopt;
    return (*data)[(*at)++];
  };
}

}  // namespace pbd
