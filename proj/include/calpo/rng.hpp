#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "calpo/errors.hpp"

namespace calpo {

// Counter-based generator: output i of a stream with key k is
// splitmix64_mix(k + i * 0x9e3779b97f4a7c15). Streams are derived from
// (master seed, purpose tag, index) so every consumer gets an independent,
// platform-independent sequence. All distributions below are implemented
// here; nothing depends on the standard library's distribution objects.
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  explicit Rng(std::uint64_t key) : key_(mix(key)) {}

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t hash_tag(std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : tag) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  static Rng derive(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
    const std::uint64_t a = mix(master + kGamma);
    const std::uint64_t b = mix(a ^ hash_tag(tag));
    return Rng(b + (index + 1) * 0xd1b54a32d192ed03ULL);
  }

  Rng split(std::string_view tag, std::uint64_t index = 0) const {
    return derive(key_, tag, index);
  }

  std::uint64_t next() {
    ++counter_;
    return mix(key_ + counter_ * kGamma);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) (Lemire's multiply-shift with rejection).
  std::size_t uniform_index(std::size_t n) {
    require(n > 0, "uniform_index: empty range");
    const std::uint64_t range = n;
    unsigned __int128 m = static_cast<unsigned __int128>(next()) * range;
    auto low = static_cast<std::uint64_t>(m);
    if (low < range) {
      const std::uint64_t threshold = (0 - range) % range;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next()) * range;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::size_t>(m >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Inverse-CDF draw from a probability vector.
  std::size_t categorical(std::span<const double> probs) {
    require(!probs.empty(), "categorical: empty distribution");
    const double u = uniform();
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] > 0.0) last_positive = i;
      acc += probs[i];
      if (u < acc) return i;
    }
    return last_positive;
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace calpo
