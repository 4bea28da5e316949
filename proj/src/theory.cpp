#include "sbmt/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sbmt/errors.hpp"

namespace sbmt {

namespace {

using Bits = std::vector<std::uint64_t>;

Bits empty_bits(std::size_t n) { return Bits((n + 63) / 64, 0); }
void set_bit(Bits& b, std::size_t i) { b[i / 64] |= std::uint64_t{1} << (i % 64); }

bool all_set(const Bits& b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!(b[i / 64] >> (i % 64) & 1)) return false;
  return true;
}

SparsityPattern make_pattern(std::size_t n, std::size_t k, std::string tag,
                             std::vector<std::vector<std::uint32_t>> attends) {
  for (auto& a : attends) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  return SparsityPattern{n, k, std::move(attends), std::move(tag)};
}

// union_in[v] = ∪_l A^l_v: the tokens from which v can be reached in one hop.
std::vector<Bits> union_attends(const std::vector<SparsityPattern>& patterns) {
  const std::size_t n = patterns.front().n;
  std::vector<Bits> u(n, empty_bits(n));
  for (const auto& p : patterns)
    for (std::size_t v = 0; v < n; ++v)
      for (auto j : p.attends[v]) set_bit(u[v], j);
  return u;
}

bool hop(const std::vector<Bits>& union_in, std::size_t from, std::size_t to) {
  return union_in[to][from / 64] >> (from % 64) & 1;
}

bool valid_path(const std::vector<Bits>& union_in, const std::vector<std::uint32_t>& path) {
  const std::size_t n = union_in.size();
  if (path.size() != n) return false;
  std::vector<bool> seen(n, false);
  for (auto v : path) {
    if (v >= n || seen[v]) return false;
    seen[v] = true;
  }
  for (std::size_t t = 0; t + 1 < n; ++t)
    if (!hop(union_in, path[t], path[t + 1])) return false;
  return true;
}

// Greedy chain through non-hub tokens, spending a hub whenever the chain is
// stuck. A hub reaches every token and is reached by every token, so the
// relay-in/relay-out step between two clusters always succeeds.
std::vector<std::uint32_t> construct_path(const std::vector<Bits>& union_in) {
  const std::size_t n = union_in.size();
  std::vector<bool> is_hub(n, true);
  for (std::size_t h = 0; h < n; ++h)
    for (std::size_t v = 0; v < n && is_hub[h]; ++v)
      if (v != h && (!hop(union_in, h, v) || !hop(union_in, v, h))) is_hub[h] = false;
  std::vector<std::uint32_t> hubs;
  for (std::size_t v = 0; v < n; ++v)
    if (is_hub[v]) hubs.push_back(static_cast<std::uint32_t>(v));
  std::reverse(hubs.begin(), hubs.end());

  std::vector<bool> used(n, false);
  for (auto h : hubs) used[h] = true;
  std::vector<std::uint32_t> path;
  std::size_t remaining = n - hubs.size();
  while (remaining > 0) {
    std::size_t next = n;
    if (!path.empty() && !is_hub[path.back()]) {
      for (std::size_t v = 0; v < n; ++v)
        if (!used[v] && hop(union_in, path.back(), v)) {
          next = v;
          break;
        }
    } else {
      for (std::size_t v = 0; v < n && next == n; ++v)
        if (!used[v]) next = v;
    }
    if (next == n) {
      if (hubs.empty()) return {};
      path.push_back(hubs.back());
      hubs.pop_back();
      continue;
    }
    used[next] = true;
    path.push_back(static_cast<std::uint32_t>(next));
    --remaining;
  }
  while (!hubs.empty()) {
    path.push_back(hubs.back());
    hubs.pop_back();
  }
  return path;
}

// Held–Karp style reachability over subsets; O(2ⁿ n²).
std::vector<std::uint32_t> exhaustive_path(const std::vector<Bits>& union_in) {
  const std::size_t n = union_in.size();
  const std::size_t full = (std::size_t{1} << n) - 1;
  std::vector<std::vector<std::int8_t>> prev(full + 1, std::vector<std::int8_t>(n, -2));
  for (std::size_t v = 0; v < n; ++v) prev[std::size_t{1} << v][v] = -1;
  for (std::size_t mask = 1; mask <= full; ++mask)
    for (std::size_t v = 0; v < n; ++v) {
      if (prev[mask][v] == -2) continue;
      for (std::size_t w = 0; w < n; ++w) {
        if (mask >> w & 1) continue;
        const std::size_t next = mask | (std::size_t{1} << w);
        if (prev[next][w] == -2 && hop(union_in, v, w)) prev[next][w] = static_cast<std::int8_t>(v);
      }
    }
  for (std::size_t end = 0; end < n; ++end) {
    if (prev[full][end] == -2) continue;
    std::vector<std::uint32_t> path;
    std::size_t mask = full, v = end;
    while (true) {
      path.push_back(static_cast<std::uint32_t>(v));
      const int p = prev[mask][v];
      mask &= ~(std::size_t{1} << v);
      if (p < 0) break;
      v = static_cast<std::size_t>(p);
    }
    std::reverse(path.begin(), path.end());
    return path;
  }
  return {};
}

void count_cycles(const std::vector<std::vector<std::uint8_t>>& adj, std::size_t v,
                  std::vector<bool>& used, std::size_t depth, std::uint64_t& count) {
  const std::size_t n = adj.size();
  if (depth == n) {
    if (adj[v][0]) ++count;
    return;
  }
  for (std::size_t w = 1; w < n; ++w) {
    if (used[w] || !adj[v][w]) continue;
    used[w] = true;
    count_cycles(adj, w, used, depth + 1, count);
    used[w] = false;
  }
}

}  // namespace

std::size_t SparsityPattern::num_edges() const {
  std::size_t total = 0;
  for (const auto& a : attends) total += a.size();
  return total;
}

bool SparsityPattern::contains(std::size_t query, std::size_t key) const {
  const auto& a = attends[query];
  return std::binary_search(a.begin(), a.end(), static_cast<std::uint32_t>(key));
}

EdgeMask SparsityPattern::to_mask() const {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (auto j : attends[i]) edges.push_back({static_cast<std::uint32_t>(i), j});
  return EdgeMask::from_edges(n, n, std::move(edges));
}

SparsityPattern SparsityPattern::from_mask(const EdgeMask& mask, std::string tag) {
  if (mask.n_q() != mask.n_k()) throw DomainError("SparsityPattern: mask must be square");
  std::vector<std::vector<std::uint32_t>> attends(mask.n_q());
  for (const auto& e : mask.edges()) attends[e.query].push_back(e.key);
  return make_pattern(mask.n_q(), 0, std::move(tag), std::move(attends));
}

TheoryPatterns build_patterns(std::size_t n, std::size_t k) {
  if (k < 2) throw DomainError("build_patterns: k must be at least 2");
  if (n <= k) throw DomainError("build_patterns: n must exceed k");
  if (n % k != 0) {
    throw DomainError("build_patterns: k = " + std::to_string(k) + " does not divide n = " +
                      std::to_string(n));
  }
  const std::size_t size = n / k;
  const std::size_t first_relay = n - k;
  auto cluster = [&](std::size_t i) { return i * k / n; };

  std::vector<std::vector<std::uint32_t>> a1(n), a2(n), a3(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto self = static_cast<std::uint32_t>(i);
    a1[i].push_back(self);
    for (std::size_t j = cluster(i) * size; j < (cluster(i) + 1) * size; ++j)
      a1[i].push_back(static_cast<std::uint32_t>(j));
    a2[i].push_back(self);
    for (std::size_t j = first_relay; j < n; ++j) a2[i].push_back(static_cast<std::uint32_t>(j));
    if (i < first_relay) {
      a3[i].push_back(self);
    } else {
      for (std::size_t j = 0; j < n; ++j) a3[i].push_back(static_cast<std::uint32_t>(j));
    }
  }

  TheoryPatterns out;
  out.a1 = make_pattern(n, k, "A1", std::move(a1));
  out.a2 = make_pattern(n, k, "A2", std::move(a2));
  out.a3 = make_pattern(n, k, "A3", std::move(a3));

  // A1: hard memberships, intensity on the diagonal blocks.
  out.r1.params = SbmParams{Matrix(n, k), scale(Matrix::identity(k), kPatternIntensity), Matrix(n, k)};
  for (std::size_t i = 0; i < n; ++i) {
    out.r1.params.y(i, cluster(i)) = 1.0;
    out.r1.params.z(i, cluster(i)) = 1.0;
  }
  // A2: one query cluster holding everyone, one key cluster holding the relays.
  out.r2.params = SbmParams{Matrix(n, 1, 1.0), Matrix(1, 1, kPatternIntensity), Matrix(n, 1)};
  for (std::size_t j = first_relay; j < n; ++j) out.r2.params.z(j, 0) = 1.0;
  out.r2.self_loops = true;
  // A3: the transpose arrangement.
  out.r3.params = SbmParams{Matrix(n, 1), Matrix(1, 1, kPatternIntensity), Matrix(n, 1, 1.0)};
  for (std::size_t i = first_relay; i < n; ++i) out.r3.params.y(i, 0) = 1.0;
  out.r3.self_loops = true;
  return out;
}

EdgeMask sample_pattern(const PatternRealization& realization, Rng& rng) {
  EdgeMask m = sample_mask(realization.params, rng);
  return realization.self_loops ? add_self_loops(m) : m;
}

std::size_t reachability_steps(const std::vector<SparsityPattern>& patterns) {
  if (patterns.empty()) throw DomainError("reachability_steps: no patterns");
  const std::size_t n = patterns.front().n;
  const std::size_t p = patterns.size();
  std::vector<Bits> sets(n, empty_bits(n));
  for (std::size_t i = 0; i < n; ++i)
    for (auto j : patterns[0].attends[i]) set_bit(sets[i], j);

  auto complete = [&] {
    for (const auto& s : sets)
      if (!all_set(s, n)) return false;
    return true;
  };
  if (complete()) return 1;
  const std::size_t cap = p * n * n + p;
  std::size_t unchanged = 0;
  for (std::size_t t = 2; t <= cap; ++t) {
    const SparsityPattern& pat = patterns[(t - 1) % p];
    std::vector<Bits> next(n, empty_bits(n));
    for (std::size_t i = 0; i < n; ++i)
      for (auto j : pat.attends[i])
        for (std::size_t w = 0; w < next[i].size(); ++w) next[i][w] |= sets[j][w];
    unchanged = next == sets ? unchanged + 1 : 0;
    sets = std::move(next);
    if (complete()) return t;
    if (unchanged >= p) break;  // fixed point over a full period
  }
  return 0;
}

AssumptionReport verify_assumption1(const std::vector<SparsityPattern>& patterns) {
  if (patterns.empty()) throw DomainError("verify_assumption1: no patterns");
  const std::size_t n = patterns.front().n;
  for (const auto& p : patterns) {
    if (p.n != n || p.attends.size() != n) {
      throw DomainError("verify_assumption1: patterns disagree on n (" + std::to_string(n) +
                        " vs " + std::to_string(p.n) + ")");
    }
  }
  AssumptionReport r;
  r.n = n;
  for (const auto& p : patterns) r.edge_counts.push_back(p.num_edges());

  r.condition1 = true;
  for (const auto& p : patterns)
    for (std::size_t i = 0; i < n; ++i) r.condition1 = r.condition1 && p.contains(i, i);

  const auto union_in = union_attends(patterns);
  std::vector<std::uint32_t> path = construct_path(union_in);
  if (!path.empty() && valid_path(union_in, path)) {
    r.condition2_method = PathMethod::kConstructive;
  } else if (n <= kExhaustivePathLimit) {
    path = exhaustive_path(union_in);
    r.condition2_method = PathMethod::kExhaustive;
  } else {
    path.clear();
  }
  if (!path.empty()) {
    if (!valid_path(union_in, path)) {
      throw ConsistencyError("verify_assumption1: witness path failed re-validation");
    }
    r.condition2 = true;
    r.path = std::move(path);
  }

  r.s = reachability_steps(patterns);
  std::vector<std::size_t> order(patterns.size());
  std::iota(order.begin(), order.end(), 0);
  if (patterns.size() <= 6) {
    do {
      std::vector<SparsityPattern> permuted;
      for (auto idx : order) permuted.push_back(patterns[idx]);
      const std::size_t s = reachability_steps(permuted);
      if (s != 0 && (r.best_s == 0 || s < r.best_s)) {
        r.best_s = s;
        r.best_order = order;
      }
    } while (std::next_permutation(order.begin(), order.end()));
  } else if (r.s != 0) {
    r.best_s = r.s;
    r.best_order = order;
  }
  r.condition3 = r.best_s != 0;
  return r;
}

std::string format_report(const AssumptionReport& r) {
  std::ostringstream oss;
  oss << "n: " << r.n << "\n";
  oss << "edge_counts:";
  for (auto c : r.edge_counts) oss << " " << c;
  oss << "\ncondition1_self_loops: " << (r.condition1 ? "true" : "false") << "\n";
  oss << "condition2_hamiltonian_path: " << (r.condition2 ? "true" : "false") << "\n";
  oss << "condition2_method: "
      << (r.condition2_method == PathMethod::kConstructive
              ? "constructive"
              : r.condition2_method == PathMethod::kExhaustive ? "exhaustive" : "none")
      << "\n";
  oss << "condition2_path:";
  for (auto v : r.path) oss << " " << v;
  oss << "\ncondition3_reachability: " << (r.condition3 ? "true" : "false") << "\n";
  oss << "s_given_order: " << r.s << "\n";
  oss << "s_best: " << r.best_s << "\n";
  oss << "s_best_order:";
  for (auto v : r.best_order) oss << " " << v;
  oss << "\npassed: " << (r.passed() ? "true" : "false") << "\n";
  return oss.str();
}

double hamiltonian_cycle_expectation(std::size_t n, double p) {
  if (n < 2) throw DomainError("hamiltonian_cycle_expectation: n must be at least 2");
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("hamiltonian_cycle_expectation: p outside [0, 1]");
  double value = 1.0;
  for (std::size_t i = 0; i < n; ++i) value *= p;
  for (std::size_t i = 2; i < n; ++i) value *= static_cast<double>(i);
  return value;
}

Threshold threshold_probability(std::size_t n) {
  if (n < 2) throw DomainError("threshold_probability: n must be at least 2");
  const double nf = static_cast<double>(n);
  Threshold t;
  t.raw = std::exp(1.0) / nf * std::pow(nf, 1.0 / nf);
  t.clamped = std::min(t.raw, 1.0);
  return t;
}

std::uint64_t count_hamiltonian_cycles(const std::vector<std::vector<std::uint8_t>>& adjacency) {
  const std::size_t n = adjacency.size();
  if (n < 2) return 0;
  std::vector<bool> used(n, false);
  used[0] = true;
  std::uint64_t count = 0;
  count_cycles(adjacency, 0, used, 1, count);
  return count;
}

MonteCarloResult monte_carlo_cycles(std::size_t n, double p, std::size_t trials, Rng& rng) {
  if (n < 2 || n > kMaxCycleCountNodes) {
    throw DomainError("monte_carlo_cycles: n must lie in [2, " +
                      std::to_string(kMaxCycleCountNodes) + "]");
  }
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("monte_carlo_cycles: p outside [0, 1]");
  if (trials == 0) throw DomainError("monte_carlo_cycles: trials must be positive");
  std::vector<std::vector<std::uint8_t>> adj(n, std::vector<std::uint8_t>(n, 0));
  double s = 0.0, s2 = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t v = 0; v < n; ++v) adj[u][v] = u != v && rng.bernoulli(p);
    const auto c = static_cast<double>(count_hamiltonian_cycles(adj));
    s += c;
    s2 += c * c;
  }
  MonteCarloResult r;
  r.trials = trials;
  r.mean = s / static_cast<double>(trials);
  const double var = std::max(0.0, s2 / static_cast<double>(trials) - r.mean * r.mean);
  r.std_error = trials > 1 ? std::sqrt(var * static_cast<double>(trials) /
                                       static_cast<double>(trials - 1) / static_cast<double>(trials))
                           : 0.0;
  return r;
}

}  // namespace sbmt
