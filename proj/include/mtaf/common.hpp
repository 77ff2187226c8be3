#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mtaf {

// Malformed or inconsistent input data (corpus files, ratings, checkpoints).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failure (non-finite loss, non-converging integration, ...).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Contract violation by the caller (bad config, bad arguments).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Deterministic RNG. mt19937_64 raw output is pinned by the standard and the
// distributions here are hand-rolled, so streams are bit-reproducible across
// platforms and library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(split_mix(seed)), inc_(split_mix(seed ^ 0x9e3779b97f4a7c15ull) | 1) {}

  uint64_t next_u64() {
    // PCG-ish xorshift-multiply; small, fast, and fully specified here.
    uint64_t x = state_;
    state_ = state_ * 6364136223846793005ull + inc_;
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdull;
    x ^= x >> 33;
    x *= 0xc4ceb9fe1a85ec53ull;
    x ^= x >> 33;
    return x;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), unbiased via rejection.
  uint64_t below(uint64_t n) {
    if (n == 0) throw UsageError("Rng::below: n must be positive");
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  int uniform_int(int lo, int hi) {  // inclusive range
    if (hi < lo) throw UsageError("Rng::uniform_int: empty range");
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo) + 1));
  }

  // Standard normal via Box-Muller (no cached spare; keeps state linear).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t split_mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  uint64_t state_;
  uint64_t inc_;
};

inline uint64_t fnv1a(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ull) {
  uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string to_hex(uint64_t v);

std::string lowercase(std::string_view s);

std::string trim(std::string_view s);

// Lowercases and splits on whitespace; punctuation characters split off as
// single-character tokens.
std::vector<std::string> split_words(std::string_view text);

}  // namespace mtaf
