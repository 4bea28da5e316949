#include "sbmt/costing.hpp"

#include <cmath>
#include <ostream>

#include "sbmt/encoder.hpp"
#include "sbmt/errors.hpp"

namespace sbmt {

namespace {

CostReport assemble(double memberships, double block, double edge_probs, double sampling,
                    double masked_dot, double softmax, double pooling, std::size_t n,
                    double mf, std::size_t k, std::size_t d) {
  const double nf = static_cast<double>(n);
  const double kf = static_cast<double>(k), df = static_cast<double>(d);
  CostReport r;
  r.components = {
      {"memberships", memberships, 8.0 * 2.0 * nf * kf},
      {"block_matrix", block, 8.0 * (kf * df + kf * kf)},
      {"edge_probabilities", edge_probs, 0.0},
      {"sampling", sampling, 0.0},
      {"masked_dot", masked_dot, 8.0 * (mf + 2.0 * nf * df)},
      {"softmax", softmax, 8.0 * mf},
      {"pooling", pooling, 0.0},
  };
  for (const auto& c : r.components) r.total_flops += c.flops;
  r.peak_floats = 2.0 * mf + 2.0 * nf * df + 2.0 * nf * kf + kf * df + kf * kf;
  r.edges = mf;
  r.density = n > 0 ? mf / (nf * nf) : 0.0;
  return r;
}

}  // namespace

const CostComponent& CostReport::component(const std::string& name) const {
  for (const auto& c : components)
    if (c.name == name) return c;
  throw InputError("CostReport: no component named '" + name + "'");
}

double CostReport::masked_attention_flops() const {
  return component("masked_dot").flops + component("softmax").flops +
         component("pooling").flops;
}

CostReport flops_attention(std::size_t n, double m, std::size_t k, std::size_t d) {
  if (!(m >= 0.0)) throw DomainError("flops_attention: m must be nonnegative");
  const double nf = static_cast<double>(n), mf = m;
  const double kf = static_cast<double>(k), df = static_cast<double>(d);
  return assemble(2.0 * 2.0 * (2.0 * nf * df * df + nf * df * kf), 2.0 * kf * kf * df,
                  2.0 * (nf * kf * kf + mf * kf), kf * kf + 2.0 * nf * kf + 2.0 * mf,
                  2.0 * mf * df, 5.0 * mf, 2.0 * mf * df, n, mf, k, d);
}

CostReport instrument_forward(const HeadForwardTrace& trace) {
  const OpCounters& c = trace.counters;
  if (!c.enabled) {
    throw UnavailableError("instrument_forward: trace was recorded without op counters");
  }
  const std::size_t n = trace.x.rows();
  const std::size_t d = trace.q.cols();
  const std::size_t k = trace.sbm.params.b.rows();
  CostReport r = assemble(2.0 * static_cast<double>(c.membership_macs),
                          2.0 * static_cast<double>(c.block_macs),
                          2.0 * static_cast<double>(c.edge_prob_macs),
                          static_cast<double>(c.sampling_ops), 2.0 * static_cast<double>(c.dot_macs),
                          static_cast<double>(c.softmax_flops),
                          2.0 * static_cast<double>(c.pool_macs), n,
                          static_cast<double>(trace.mask.num_edges()), k, d);
  r.peak_floats = static_cast<double>(c.peak_live_floats);
  r.density = trace.density;
  return r;
}

std::vector<DensityRow> density_report(std::span<const TrainMetrics> history,
                                       std::size_t n_layers, std::size_t n_heads) {
  if (history.empty()) throw DomainError("density_report: empty history");
  const std::size_t slots = n_layers * n_heads;
  std::vector<DensityRow> rows;
  for (std::size_t slot = 0; slot < slots; ++slot) {
    double mean = 0.0;
    for (const auto& m : history) {
      if (m.head_density_mean.size() != slots) {
        throw ShapeError("density_report: metrics hold " +
                         std::to_string(m.head_density_mean.size()) + " heads, expected " +
                         std::to_string(slots));
      }
      mean += m.head_density_mean[slot];
    }
    mean /= static_cast<double>(history.size());
    double var = 0.0;
    for (const auto& m : history) {
      const double diff = m.head_density_mean[slot] - mean;
      var += diff * diff;
    }
    rows.push_back({slot / n_heads, slot % n_heads, mean,
                    std::sqrt(var / static_cast<double>(history.size()))});
  }
  return rows;
}

void write_density_csv(std::ostream& out, std::span<const DensityRow> rows) {
  out << "layer,head,metric,value\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.layer << "," << r.head << ",density_mean," << r.mean << "\n";
    out << r.layer << "," << r.head << ",density_std," << r.std << "\n";
  }
}

void write_cost_csv(std::ostream& out, const CostReport& report) {
  out << "# " << kFlopConvention << "\n";
  out << "component,flops,bytes\n";
  out.precision(15);
  double bytes = 0.0;
  for (const auto& c : report.components) {
    out << c.name << "," << c.flops << "," << c.bytes << "\n";
    bytes += c.bytes;
  }
  out << "total," << report.total_flops << "," << bytes << "\n";
}

}  // namespace sbmt
