#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace sbmt {

// Stream purposes for Rng::derive. Every random draw in the library comes from
// a stream derived from one master seed plus a path of these tags and counters.
enum class Stream : std::uint64_t {
  kInit = 1,
  kData = 2,
  kSample = 3,
  kDropout = 4,
  kEval = 5,
  kTheory = 6,
};

// Seeded pseudo-random stream. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard; all distributions below are implemented
// here so results do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Counter-based substream: seed = fold of splitmix64 over (master, path...).
  // Distinct paths give statistically independent streams; the same path
  // always reproduces the same stream.
  static Rng derive(std::uint64_t master, std::initializer_list<std::uint64_t> path);
  static std::uint64_t mix(std::uint64_t x);

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on (0, 1).
  double uniform_open();
  // Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  std::uint64_t poisson(double mean);
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sbmt
