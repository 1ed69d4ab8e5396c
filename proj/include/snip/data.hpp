// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "snip/error.hpp"
#include "snip/tensor.hpp"

namespace snip {

/// A batch of `batch_size` token rows, each `seq_len + 1` long: positions
/// [0, seq_len) are inputs and [1, seq_len] the next-token targets.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::uint32_t> tokens;
  /// Per-target loss weights (batch_size * seq_len); empty means all ones.
  std::vector<double> target_weight;

  std::size_t row_len() const { return seq_len + 1; }
  std::size_t num_targets() const { return batch_size * seq_len; }
  std::uint32_t input(std::size_t b, std::size_t t) const { return tokens[b * row_len() + t]; }
  std::uint32_t target(std::size_t b, std::size_t t) const { return tokens[b * row_len() + t + 1]; }
  double weight(std::size_t i) const { return target_weight.empty() ? 1.0 : target_weight[i]; }
};

/// FNV-1a over the token ids and weights, as 16 hex digits.
inline std::string batch_digest(const Batch& batch) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  feed(batch.batch_size);
  feed(batch.seq_len);
  for (auto t : batch.tokens) feed(t);
  for (double w : batch.target_weight) feed(std::bit_cast<std::uint64_t>(w));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Seeded order-2 Markov chain. The successor set of a context depends on
/// prev1; their weights also depend on prev2 through a small feature
/// (prev2 mod 4). All derived by hashing, so no transition table is stored.
class MarkovSource {
 public:
  static constexpr std::uint32_t kPrev2Classes = 4;

  MarkovSource(std::uint64_t seed, std::size_t vocab, std::size_t branching = 4)
      : seed_(seed), vocab_(vocab), branching_(branching) {
    if (vocab < 2) throw InvalidArgument("MarkovSource needs vocab >= 2");
    if (branching < 1) throw InvalidArgument("MarkovSource needs branching >= 1");
  }

  std::size_t vocab() const { return vocab_; }

  std::uint32_t next(std::uint32_t prev2, std::uint32_t prev1, RngStream& rng) const {
    const std::uint64_t succ = detail::mix64(seed_, prev1);
    const std::uint64_t ctx = detail::mix64(succ, prev2 % kPrev2Classes);
    double total = 0.0;
    std::vector<double> w(branching_);
    for (std::size_t k = 0; k < branching_; ++k) {
      const double u = static_cast<double>(detail::mix64(ctx, k) >> 11) * 0x1.0p-53;
      w[k] = u * u * u + 0.02;
      total += w[k];
    }
    double r = rng.uniform() * total;
    std::size_t pick = branching_ - 1;
    for (std::size_t k = 0; k < branching_; ++k) {
      if (r < w[k]) {
        pick = k;
        break;
      }
      r -= w[k];
    }
    return static_cast<std::uint32_t>(detail::mix64(succ, 0x5cc + pick) % vocab_);
  }

  Batch sample(std::size_t batch_size, std::size_t seq_len, RngStream& rng) const {
    Batch b{batch_size, seq_len, {}, {}};
    b.tokens.resize(batch_size * (seq_len + 1));
    for (std::size_t r = 0; r < batch_size; ++r) {
      std::uint32_t* row = b.tokens.data() + r * (seq_len + 1);
      for (std::size_t t = 0; t <= seq_len; ++t) {
        row[t] = t < 2 ? static_cast<std::uint32_t>(rng.below(vocab_)) : next(row[t - 2], row[t - 1], rng);
      }
    }
    return b;
  }

 private:
  std::uint64_t seed_;
  std::size_t vocab_;
  std::size_t branching_;
};

}  // namespace snip
