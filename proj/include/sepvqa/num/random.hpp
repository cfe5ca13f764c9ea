#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace sepvqa::num {

/// Seed for a named stage, derived by hashing (seed, stage[, index]). Streams for different
/// stages never depend on how much randomness another stage consumed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage, std::uint64_t index);

/// mt19937_64 with distributions written out explicitly, so draws are identical on every
/// standard library (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n must be positive.
  std::size_t below(std::size_t n);
  /// Standard normal via Box-Muller; consumes exactly two uniforms.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  /// Index drawn proportionally to nonnegative weights; throws if they sum to zero.
  std::size_t categorical(std::span<const double> weights);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
  }

  /// Full engine state as 64-bit words, for checkpointing.
  std::vector<std::uint64_t> state_words() const;
  void set_state_words(std::span<const std::uint64_t> words);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sepvqa::num
