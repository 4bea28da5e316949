#include "sbmt/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>

#include "sbmt/errors.hpp"

namespace sbmt {

double SbmParams::intensity(std::size_t i, std::size_t j) const {
  const std::size_t k = clusters();
  double total = 0.0;
  for (std::size_t u = 0; u < k; ++u) {
    const double yu = y(i, u);
    if (yu == 0.0) continue;
    double inner = 0.0;
    for (std::size_t v = 0; v < k; ++v) inner += b(u, v) * z(j, v);
    total += yu * inner;
  }
  return total;
}

void validate(const SbmParams& params) {
  const std::size_t k = params.b.rows();
  if (params.b.cols() != k || params.y.cols() != k || params.z.cols() != k) {
    throw ShapeError("SbmParams: Y " + params.y.shape_string() + ", B " +
                     params.b.shape_string() + ", Z " + params.z.shape_string() +
                     " do not share a cluster count");
  }
  auto check = [](const Matrix& m, const char* name) {
    for (double v : m.values()) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw DomainError(std::string("SbmParams: ") + name +
                          " has a negative or non-finite entry");
      }
    }
  };
  check(params.y, "Y");
  check(params.b, "B");
  check(params.z, "Z");
}

NormalizedSbm normalize(const SbmParams& params) {
  validate(params);
  const std::size_t k = params.clusters();
  NormalizedSbm out;
  const Matrix y_sums = column_sums(params.y);
  const Matrix z_sums = column_sums(params.z);
  out.y_bar = params.y;
  out.z_bar = params.z;
  out.y_empty.assign(k, false);
  out.z_empty.assign(k, false);
  for (std::size_t u = 0; u < k; ++u) {
    out.y_empty[u] = y_sums[u] == 0.0;
    out.z_empty[u] = z_sums[u] == 0.0;
  }
  for (std::size_t i = 0; i < out.y_bar.rows(); ++i)
    for (std::size_t u = 0; u < k; ++u)
      if (!out.y_empty[u]) out.y_bar(i, u) /= y_sums[u];
  for (std::size_t j = 0; j < out.z_bar.rows(); ++j)
    for (std::size_t v = 0; v < k; ++v)
      if (!out.z_empty[v]) out.z_bar(j, v) /= z_sums[v];
  out.b_bar = Matrix(k, k);
  for (std::size_t u = 0; u < k; ++u)
    for (std::size_t v = 0; v < k; ++v) {
      out.b_bar(u, v) = y_sums[u] * params.b(u, v) * z_sums[v];
      out.total_intensity += out.b_bar(u, v);
    }
  return out;
}

AliasTable::AliasTable(std::span<const double> weights) {
  const std::size_t n = weights.size();
  if (n == 0) throw DomainError("AliasTable: no outcomes");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw DomainError("AliasTable: weights must be finite and nonnegative");
    }
    total += w;
  }
  if (!(total > 0.0)) throw DomainError("AliasTable: weights sum to zero");
  prob_.assign(n, 0.0);
  alias_.assign(n, 0);
  std::vector<double> scaled(n);
  std::vector<std::uint32_t> small, large;
  small.reserve(n);
  large.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    scaled[i] = weights[i] * static_cast<double>(n) / total;
    (scaled[i] < 1.0 ? small : large).push_back(static_cast<std::uint32_t>(i));
  }
  while (!small.empty() && !large.empty()) {
    const std::uint32_t s = small.back();
    small.pop_back();
    const std::uint32_t l = large.back();
    prob_[s] = scaled[s];
    alias_[s] = l;
    scaled[l] = (scaled[l] + scaled[s]) - 1.0;
    if (scaled[l] < 1.0) {
      large.pop_back();
      small.push_back(l);
    }
  }
  for (std::uint32_t l : large) {
    prob_[l] = 1.0;
    alias_[l] = l;
  }
  // Leftovers here are rounding residue of outcomes that should be certain.
  for (std::uint32_t s : small) {
    prob_[s] = 1.0;
    alias_[s] = s;
  }
}

std::size_t AliasTable::sample(Rng& rng) const {
  const std::size_t col = static_cast<std::size_t>(rng.below(prob_.size()));
  return rng.uniform() < prob_[col] ? col : alias_[col];
}

double AliasTable::probability(std::size_t i) const {
  const double n = static_cast<double>(prob_.size());
  double p = prob_[i] / n;
  for (std::size_t c = 0; c < prob_.size(); ++c)
    if (c != i && alias_[c] == i) p += (1.0 - prob_[c]) / n;
  return p;
}

EdgeMask::EdgeMask(std::size_t n_q, std::size_t n_k)
    : n_q_(n_q), n_k_(n_k), row_offsets_(n_q + 1, 0) {}

EdgeMask EdgeMask::from_edges(std::size_t n_q, std::size_t n_k, std::vector<Edge> edges) {
  EdgeMask mask(n_q, n_k);
  for (const Edge& e : edges) {
    if (e.query >= n_q || e.key >= n_k) {
      std::ostringstream oss;
      oss << "EdgeMask: edge (" << e.query << ", " << e.key << ") outside " << n_q << "x"
          << n_k;
      throw DomainError(oss.str());
    }
  }
  // Counting sort by query, then sort keys within each row.
  std::vector<std::size_t> counts(n_q + 1, 0);
  for (const Edge& e : edges) ++counts[e.query + 1];
  for (std::size_t i = 0; i < n_q; ++i) counts[i + 1] += counts[i];
  std::vector<Edge> bucketed(edges.size());
  {
    std::vector<std::size_t> cursor(counts.begin(), counts.end() - 1);
    for (const Edge& e : edges) bucketed[cursor[e.query]++] = e;
  }
  mask.edges_.reserve(bucketed.size());
  for (std::size_t i = 0; i < n_q; ++i) {
    auto first = bucketed.begin() + static_cast<std::ptrdiff_t>(counts[i]);
    auto last = bucketed.begin() + static_cast<std::ptrdiff_t>(counts[i + 1]);
    std::sort(first, last);
    last = std::unique(first, last);
    mask.edges_.insert(mask.edges_.end(), first, last);
    mask.row_offsets_[i + 1] = mask.edges_.size();
  }
  return mask;
}

EdgeMask EdgeMask::full(std::size_t n_q, std::size_t n_k) {
  std::vector<Edge> edges;
  edges.reserve(n_q * n_k);
  for (std::size_t i = 0; i < n_q; ++i)
    for (std::size_t j = 0; j < n_k; ++j)
      edges.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
  return from_edges(n_q, n_k, std::move(edges));
}

EdgeMask EdgeMask::identity(std::size_t n) {
  std::vector<Edge> edges;
  edges.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    edges.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i)});
  return from_edges(n, n, std::move(edges));
}

bool EdgeMask::contains(std::size_t i, std::size_t j) const {
  if (i >= n_q_) return false;
  auto r = row(i);
  return std::binary_search(r.begin(), r.end(),
                            Edge{static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
}

namespace {

// Draws the raw (pre-dedup) fastRG multigraph with every intensity scaled by
// `intensity_scale`.
std::vector<Edge> draw_multigraph(const NormalizedSbm& norm, double intensity_scale, Rng& rng,
                                  SampleStats* stats) {
  std::vector<Edge> edges;
  const double mean = norm.total_intensity * intensity_scale;
  if (!(mean > 0.0)) return edges;
  const std::uint64_t m = rng.poisson(mean);
  if (stats != nullptr) stats->raw_edges += m;
  if (m == 0) return edges;

  const std::size_t k = norm.b_bar.rows();
  const AliasTable block_table(norm.b_bar.values());
  if (stats != nullptr) stats->alias_build_ops += k * k;

  // Per-cluster node tables, built only for clusters that are actually drawn.
  std::vector<std::optional<AliasTable>> y_tables(k), z_tables(k);
  std::vector<double> column;
  auto column_table = [&](const Matrix& bar, std::size_t c,
                          std::vector<std::optional<AliasTable>>& tables) -> const AliasTable& {
    if (!tables[c]) {
      column.resize(bar.rows());
      for (std::size_t i = 0; i < bar.rows(); ++i) column[i] = bar(i, c);
      tables[c].emplace(column);
      if (stats != nullptr) stats->alias_build_ops += bar.rows();
    }
    return *tables[c];
  };

  edges.reserve(m);
  for (std::uint64_t e = 0; e < m; ++e) {
    const std::size_t uv = block_table.sample(rng);
    const std::size_t u = uv / k;
    const std::size_t v = uv % k;
    const std::size_t i = column_table(norm.y_bar, u, y_tables).sample(rng);
    const std::size_t j = column_table(norm.z_bar, v, z_tables).sample(rng);
    edges.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
  }
  if (stats != nullptr) stats->draws += 3 * m;
  return edges;
}

}  // namespace

EdgeMask sample_mask(const SbmParams& params, Rng& rng, SampleStats* stats) {
  const NormalizedSbm norm = normalize(params);
  EdgeMask mask =
      EdgeMask::from_edges(params.n_q(), params.n_k(), draw_multigraph(norm, 1.0, rng, stats));
  if (stats != nullptr) {
    stats->distinct_edges += mask.num_edges();
    stats->kept_edges += mask.num_edges();
  }
  return mask;
}

EdgeMask sample_mask_exact(const SbmParams& params, Rng& rng, double cap, SampleStats* stats) {
  if (!(cap > 0.0 && cap < 1.0)) throw DomainError("sample_mask_exact: cap must be in (0, 1)");
  const NormalizedSbm norm = normalize(params);
  const double oversample = -std::log1p(-cap) / cap;
  const EdgeMask candidates = EdgeMask::from_edges(
      params.n_q(), params.n_k(), draw_multigraph(norm, oversample, rng, stats));
  if (stats != nullptr) stats->distinct_edges += candidates.num_edges();

  const std::size_t k = params.clusters();
  std::vector<double> row_block(k);  // Yᵢ B
  std::vector<Edge> kept;
  kept.reserve(candidates.num_edges());
  for (std::size_t i = 0; i < candidates.n_q(); ++i) {
    auto row = candidates.row(i);
    if (row.empty()) continue;
    std::fill(row_block.begin(), row_block.end(), 0.0);
    for (std::size_t u = 0; u < k; ++u) {
      const double yu = params.y(i, u);
      if (yu == 0.0) continue;
      for (std::size_t v = 0; v < k; ++v) row_block[v] += yu * params.b(u, v);
    }
    for (const Edge& e : row) {
      double lambda = 0.0;
      for (std::size_t v = 0; v < k; ++v) lambda += row_block[v] * params.z(e.key, v);
      const double present = -std::expm1(-oversample * lambda);
      const double keep = present > 0.0 ? std::min(lambda, cap) / present : 0.0;
      if (rng.uniform() < keep) kept.push_back(e);
    }
    if (stats != nullptr) stats->intensity_evals += row.size();
  }
  EdgeMask mask = EdgeMask::from_edges(params.n_q(), params.n_k(), std::move(kept));
  if (stats != nullptr) stats->kept_edges += mask.num_edges();
  return mask;
}

EdgeMask add_self_loops(const EdgeMask& mask) {
  if (mask.n_q() != mask.n_k()) {
    throw DomainError("add_self_loops: mask is " + std::to_string(mask.n_q()) + "x" +
                      std::to_string(mask.n_k()) + ", not square");
  }
  std::vector<Edge> edges = mask.edges();
  for (std::size_t i = 0; i < mask.n_q(); ++i)
    edges.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i)});
  return EdgeMask::from_edges(mask.n_q(), mask.n_k(), std::move(edges));
}

SbmParams with_exploration(const SbmParams& params, double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) {
    throw DomainError("with_exploration: delta must lie in [0, 1]");
  }
  validate(params);
  if (delta == 0.0) return params;
  const std::size_t k = params.clusters();
  SbmParams out;
  out.y = Matrix(params.n_q(), k + 1);
  out.z = Matrix(params.n_k(), k + 1);
  out.b = Matrix(k + 1, k + 1);
  set_cols(out.y, 0, params.y);
  set_cols(out.z, 0, params.z);
  for (std::size_t i = 0; i < params.n_q(); ++i) out.y(i, k) = 1.0;
  for (std::size_t j = 0; j < params.n_k(); ++j) out.z(j, k) = 1.0;
  for (std::size_t u = 0; u < k; ++u)
    for (std::size_t v = 0; v < k; ++v) out.b(u, v) = params.b(u, v);
  out.b(k, k) = delta;
  return out;
}

double mask_density(const EdgeMask& mask) {
  const double cells = static_cast<double>(mask.n_q()) * static_cast<double>(mask.n_k());
  return cells == 0.0 ? 0.0 : static_cast<double>(mask.num_edges()) / cells;
}

void write_mask(std::ostream& out, const EdgeMask& mask) {
  out << mask.n_q() << ' ' << mask.n_k() << ' ' << mask.num_edges() << '\n';
  for (const Edge& e : mask.edges()) out << e.query << ' ' << e.key << '\n';
}

EdgeMask read_mask(std::istream& in) {
  std::size_t n_q = 0, n_k = 0, m = 0;
  if (!(in >> n_q >> n_k >> m)) throw InputError("mask dump: missing header");
  std::vector<Edge> edges;
  edges.reserve(m);
  for (std::size_t e = 0; e < m; ++e) {
    std::uint64_t i = 0, j = 0;
    if (!(in >> i >> j)) throw InputError("mask dump: truncated edge list");
    edges.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
  }
  EdgeMask mask = EdgeMask::from_edges(n_q, n_k, std::move(edges));
  if (mask.num_edges() != m) throw InputError("mask dump: duplicate edges");
  return mask;
}

}  // namespace sbmt
