#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "sbmt/rng.hpp"
#include "sbmt/sampler.hpp"

namespace sbmt {

// A_i for every query i: the keys it attends. Viewed as a directed graph,
// j → i is an edge whenever j ∈ A_i. Tokens are indexed 0..n−1.
struct SparsityPattern {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::vector<std::uint32_t>> attends;  // sorted, deduplicated
  std::string tag;                                  // A1, A2, A3, union or custom

  std::size_t num_edges() const;
  bool contains(std::size_t query, std::size_t key) const;
  EdgeMask to_mask() const;
  static SparsityPattern from_mask(const EdgeMask& mask, std::string tag = "custom");
};

// SBM whose samples reproduce a pattern: every required edge has intensity
// kPatternIntensity, every other pair zero, and diagonal entries not covered
// by the block structure come from add_self_loops.
struct PatternRealization {
  SbmParams params;
  bool self_loops = false;
};

inline constexpr double kPatternIntensity = 14.0;

struct TheoryPatterns {
  SparsityPattern a1, a2, a3;
  PatternRealization r1, r2, r3;
};

// A1: block diagonal, cluster of i is ⌊ik/n⌋. A2: every token attends itself and
// the last k tokens (relays). A3: relays attend everything, others only themselves.
// Requires k ≥ 2, n > k and k | n; throws DomainError otherwise.
TheoryPatterns build_patterns(std::size_t n, std::size_t k);

EdgeMask sample_pattern(const PatternRealization& realization, Rng& rng);

enum class PathMethod { kNone, kConstructive, kExhaustive };

struct AssumptionReport {
  std::size_t n = 0;
  bool condition1 = false;
  bool condition2 = false;
  PathMethod condition2_method = PathMethod::kNone;
  // γ: consecutive entries satisfy γ[t] ∈ ∪_l A^l_{γ[t+1]}.
  std::vector<std::uint32_t> path;
  bool condition3 = false;
  std::size_t s = 0;           // for the patterns in the order given (0 when not reached)
  std::size_t best_s = 0;      // minimum over orderings of the patterns
  std::vector<std::size_t> best_order;
  std::vector<std::size_t> edge_counts;

  bool passed() const { return condition1 && condition2 && condition3; }
};

// Exhaustive Hamiltonian-path search is used when construction fails and n
// does not exceed this.
inline constexpr std::size_t kExhaustivePathLimit = 10;

// Throws DomainError for an empty list or patterns over different n.
AssumptionReport verify_assumption1(const std::vector<SparsityPattern>& patterns);

// Smallest s with S_i^s = [n] for every i under S_i^1 = A^1_i and
// S_i^t = ∪_{j ∈ A_i^{((t−1) mod p)+1}} S_j^{t−1}; 0 if never reached.
std::size_t reachability_steps(const std::vector<SparsityPattern>& patterns);

std::string format_report(const AssumptionReport& report);

// pⁿ (n−1)!: expected number of directed Hamiltonian cycles in G(n, p).
double hamiltonian_cycle_expectation(std::size_t n, double p);

struct Threshold {
  double raw = 0.0;      // (e/n)·n^(1/n)
  double clamped = 0.0;  // min(raw, 1)
};
Threshold threshold_probability(std::size_t n);

// Exact number of directed Hamiltonian cycles of an adjacency matrix
// (adjacency[u][v] means u → v). Self-loops are ignored.
std::uint64_t count_hamiltonian_cycles(const std::vector<std::vector<std::uint8_t>>& adjacency);

struct MonteCarloResult {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t trials = 0;
};

inline constexpr std::size_t kMaxCycleCountNodes = 9;

// Samples directed G(n, p) graphs and counts Hamiltonian cycles exactly.
// Requires 2 ≤ n ≤ kMaxCycleCountNodes.
MonteCarloResult monte_carlo_cycles(std::size_t n, double p, std::size_t trials, Rng& rng);

}  // namespace sbmt
