#pragma once

#include <cstdint>
#include <string_view>

namespace nlte {

// Deterministic 64-bit generator with named substreams.
//
// A generator is identified by a key. The root key is the user seed; child
// streams derive their key by hashing (parent key, id) so the draw order of
// one stream never shifts another. The raw generator is SplitMix64, which is
// portable and bitwise-stable across platforms; all distributions below are
// built only on next_u64 so results never depend on the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Child stream addressed by number or by tag (FNV-1a of the tag).
  Rng stream(std::uint64_t id) const;
  Rng stream(std::string_view tag) const;

  std::uint64_t key() const { return key_; }

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53-bit resolution.
  double uniform01();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n); n must be > 0.
  int uniform_int(int n);
  // Box-Muller; the spare draw is cached, so draw order is still deterministic.
  double normal(double mean = 0.0, double stddev = 1.0);
  // Marsaglia-Tsang; shape > 0, unit scale.
  double gamma(double shape);
  double beta(double a, double b);

 private:
  std::uint64_t key_ = 0;
  std::uint64_t state_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace nlte
