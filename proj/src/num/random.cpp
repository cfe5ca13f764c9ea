#include "sepvqa/num/random.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace sepvqa::num {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) { return splitmix(splitmix(seed) ^ fnv1a(stage)); }

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage, std::uint64_t index) {
  return splitmix(derive_seed(seed, stage) ^ splitmix(index + 0x632be59bd9b4e019ULL));
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below(0)");
  const std::uint64_t bound = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<std::size_t>(x % bound);
}

double Rng::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("negative categorical weight");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("categorical weights sum to zero");
  const double target = uniform() * total;
  double running = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    running += weights[i];
    if (target < running && weights[i] > 0.0) return i;
  }
  for (std::size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0.0) return i;
  return 0;
}

std::vector<std::uint64_t> Rng::state_words() const {
  std::ostringstream out;
  out << engine_;
  std::istringstream in(out.str());
  std::vector<std::uint64_t> words;
  std::uint64_t w = 0;
  while (in >> w) words.push_back(w);
  return words;
}

void Rng::set_state_words(std::span<const std::uint64_t> words) {
  std::ostringstream out;
  for (std::size_t i = 0; i < words.size(); ++i) out << (i ? " " : "") << words[i];
  std::istringstream in(out.str());
  std::mt19937_64 engine;
  in >> engine;
  if (in.fail()) throw std::invalid_argument("malformed rng state");
  engine_ = engine;
}

}  // namespace sepvqa::num
