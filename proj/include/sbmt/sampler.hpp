#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sbmt/matrix.hpp"
#include "sbmt/rng.hpp"

namespace sbmt {

// Mixed-membership SBM over a bipartite graph: P-intensity of edge (i, j) is
// (Y B Zᵀ)ᵢⱼ. Y is n_q×k (query memberships), B is k×k, Z is n_k×k.
struct SbmParams {
  Matrix y;
  Matrix b;
  Matrix z;

  std::size_t n_q() const { return y.rows(); }
  std::size_t n_k() const { return z.rows(); }
  std::size_t clusters() const { return b.rows(); }
  // (Y B Zᵀ)ᵢⱼ evaluated in O(k²).
  double intensity(std::size_t i, std::size_t j) const;
};

// Throws ShapeError / DomainError for inconsistent shapes or negative entries.
void validate(const SbmParams& params);

// fastRG normalization: column-stochastic Ȳ, Z̄ and B̄ absorbing the column sums.
struct NormalizedSbm {
  Matrix y_bar;
  Matrix z_bar;
  Matrix b_bar;
  std::vector<bool> y_empty;  // cluster u has an all-zero Y column
  std::vector<bool> z_empty;
  double total_intensity = 0.0;
};

NormalizedSbm normalize(const SbmParams& params);

// Walker/Vose alias table: O(size) construction, O(1) draws.
class AliasTable {
 public:
  AliasTable() = default;
  // Weights must be nonnegative with a positive sum.
  explicit AliasTable(std::span<const double> weights);

  std::size_t size() const { return prob_.size(); }
  std::size_t sample(Rng& rng) const;
  // Exact probability of drawing outcome i implied by the table.
  double probability(std::size_t i) const;

 private:
  std::vector<double> prob_;
  std::vector<std::uint32_t> alias_;
};

struct Edge {
  std::uint32_t query;
  std::uint32_t key;
  auto operator<=>(const Edge&) const = default;
};

// Binary bipartite adjacency as a sorted, deduplicated edge list with CSR row
// offsets. This is the attention mask M.
class EdgeMask {
 public:
  EdgeMask() = default;
  EdgeMask(std::size_t n_q, std::size_t n_k);
  // Sorts and deduplicates; throws DomainError for out-of-range indices.
  static EdgeMask from_edges(std::size_t n_q, std::size_t n_k, std::vector<Edge> edges);
  static EdgeMask full(std::size_t n_q, std::size_t n_k);
  static EdgeMask identity(std::size_t n);

  std::size_t n_q() const { return n_q_; }
  std::size_t n_k() const { return n_k_; }
  std::size_t num_edges() const { return edges_.size(); }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<std::size_t>& row_offsets() const { return row_offsets_; }
  std::span<const Edge> row(std::size_t i) const {
    return {edges_.data() + row_offsets_[i], row_offsets_[i + 1] - row_offsets_[i]};
  }
  bool contains(std::size_t i, std::size_t j) const;

  bool operator==(const EdgeMask&) const = default;

 private:
  std::size_t n_q_ = 0;
  std::size_t n_k_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::size_t> row_offsets_{0};
};

// Operation counters for one sampling call.
struct SampleStats {
  std::uint64_t raw_edges = 0;        // Poisson draw m (pre-dedup)
  std::uint64_t distinct_edges = 0;   // after collapsing duplicates
  std::uint64_t kept_edges = 0;       // after thinning (exact-probability sampler)
  std::uint64_t alias_build_ops = 0;  // entries processed building alias tables
  std::uint64_t draws = 0;            // categorical draws
  std::uint64_t intensity_evals = 0;  // per-edge intensity evaluations (thinning)
};

// fastRG: m ~ Poisson(1ᵀB̄1); each draw picks (u,v) ∝ B̄, then i ~ Ȳ·ᵤ and
// j ~ Z̄·ᵥ. Duplicate draws collapse, so P(Mᵢⱼ = 1) = 1 − exp(−(Y B Zᵀ)ᵢⱼ).
EdgeMask sample_mask(const SbmParams& params, Rng& rng, SampleStats* stats = nullptr);

// Default ceiling for sample_mask_exact; fastRG cannot emit probability 1.
inline constexpr double kDefaultProbabilityCap = 0.99;

// Edge (i, j) present with probability exactly min((Y B Zᵀ)ᵢⱼ, cap), still in
// time linear in the number of edges: fastRG runs with intensities scaled by
// c = −ln(1 − cap)/cap, then each distinct candidate is kept with probability
// min(λ, cap) / (1 − exp(−c λ)).
EdgeMask sample_mask_exact(const SbmParams& params, Rng& rng,
                           double cap = kDefaultProbabilityCap,
                           SampleStats* stats = nullptr);

// Sets Mᵢᵢ = 1 for every i. Requires a square mask.
EdgeMask add_self_loops(const EdgeMask& mask);

// Adds a background cluster: Y and Z gain a column of ones and B gains
// a row/column that is zero except for δ on the new diagonal entry, so every
// pair's intensity grows by exactly δ.
SbmParams with_exploration(const SbmParams& params, double delta);

double mask_density(const EdgeMask& mask);

// Text dump: header "n_q n_k num_edges", then one "i j" line per edge.
void write_mask(std::ostream& out, const EdgeMask& mask);
EdgeMask read_mask(std::istream& in);

}  // namespace sbmt
