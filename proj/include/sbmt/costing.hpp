#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sbmt/attention.hpp"

namespace sbmt {

struct TrainMetrics;

// Convention used by every report: one multiply-add counts as 2 FLOPs.
inline constexpr const char* kFlopConvention = "1 multiply-add = 2 FLOPs";

struct CostComponent {
  std::string name;
  double flops = 0.0;
  double bytes = 0.0;  // live f64 floats attributed to this step, times 8
};

// Components, in order: memberships, block_matrix, edge_probabilities,
// sampling, masked_dot, softmax, pooling.
struct CostReport {
  std::vector<CostComponent> components;
  double total_flops = 0.0;
  double peak_floats = 0.0;
  double edges = 0.0;  // m; may be an expectation
  double density = 0.0;

  const CostComponent& component(const std::string& name) const;
  // masked_dot + softmax + pooling: the only part that depends on m.
  double masked_attention_flops() const;
};

// Closed-form cost of one head forward with n tokens, m sampled edges,
// k clusters and head dimension d:
//   memberships   2·2(2nd² + ndk)     shared MLP on Q and K, then node·Cᵀ
//   block_matrix  2·k²d               C Cᵀ (softmax over k² is folded in below)
//   edge_probs    2·(nk² + mk)        Q̂Ŝ, then one k-dot per edge
//   sampling      k² + 2nk + 2m       alias tables plus candidate draws
//   masked_dot    2·md
//   softmax       5m
//   pooling       2·md
// Peak memory: 2m + 2nd + 2nk + kd + k² floats.
CostReport flops_attention(std::size_t n, double m, std::size_t k, std::size_t d);

// Counted cost of a traced forward. Throws UnavailableError when the trace
// was produced without count_ops.
CostReport instrument_forward(const HeadForwardTrace& trace);

struct DensityRow {
  std::size_t layer = 0;
  std::size_t head = 0;
  double mean = 0.0;
  double std = 0.0;  // population std across the history
};

// Mean ± std of each head's per-step mean density. Throws DomainError when
// the history is empty.
std::vector<DensityRow> density_report(std::span<const TrainMetrics> history,
                                       std::size_t n_layers, std::size_t n_heads);

// `layer,head,metric,value` with metric ∈ {density_mean, density_std}.
void write_density_csv(std::ostream& out, std::span<const DensityRow> rows);
// `component,flops,bytes`, one row per component plus a total row.
void write_cost_csv(std::ostream& out, const CostReport& report);

}  // namespace sbmt
