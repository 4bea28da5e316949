#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <utility>
#include <vector>

namespace oracle {

// Exact E[#directed Hamiltonian cycles] in G(n, p) by enumerating every
// digraph on n nodes and counting cycles over all n! orderings (each cycle
// appears n times).
inline double exhaustive_cycle_expectation(std::size_t n, double p) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v)
      if (u != v) pairs.push_back({u, v});
  const std::size_t e = pairs.size();
  double expectation = 0.0;
  for (std::size_t g = 0; g < (std::size_t{1} << e); ++g) {
    std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
    std::size_t present = 0;
    for (std::size_t b = 0; b < e; ++b)
      if (g >> b & 1) {
        adj[pairs[b].first][pairs[b].second] = true;
        ++present;
      }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::size_t cycles = 0;
    do {
      bool ok = true;
      for (std::size_t i = 0; i < n && ok; ++i) ok = adj[perm[i]][perm[(i + 1) % n]];
      cycles += ok;
    } while (std::next_permutation(perm.begin(), perm.end()));
    const double weight = std::pow(p, static_cast<double>(present)) *
                          std::pow(1.0 - p, static_cast<double>(e - present));
    expectation += weight * static_cast<double>(cycles) / static_cast<double>(n);
  }
  return expectation;
}

}  // namespace oracle
