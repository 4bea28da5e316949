#include "sbmt/attention.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sbmt/errors.hpp"
#include "sbmt/numerics.hpp"

namespace sbmt {

AttentionHead AttentionHead::init(std::size_t d, std::size_t d_h, std::size_t k, Rng& rng,
                                  double delta, bool self_loops) {
  if (d == 0 || d_h == 0 || k == 0) {
    throw DomainError("AttentionHead::init: dimensions and cluster count must be positive");
  }
  AttentionHead h;
  h.w_query = Matrix(d, d_h);
  h.w_key = Matrix(d, d_h);
  h.w_value = Matrix(d, d_h);
  fill_normal(h.w_query, rng, 0.02);
  fill_normal(h.w_key, rng, 0.02);
  fill_normal(h.w_value, rng, 0.02);
  h.mlp_w1 = Matrix(d_h, d_h);
  h.mlp_w2 = Matrix(d_h, d_h);
  fill_kaiming_normal(h.mlp_w1, rng, d_h);
  fill_kaiming_normal(h.mlp_w2, rng, d_h);
  h.mlp_b1 = Matrix(1, d_h);
  h.mlp_b2 = Matrix(1, d_h);
  h.clusters = Matrix(k, d_h);
  fill_kaiming_normal(h.clusters, rng, d_h);
  h.delta = delta;
  h.self_loops = self_loops;
  return h;
}

void validate(const AttentionHead& head) {
  const std::size_t d = head.w_query.rows();
  const std::size_t d_h = head.w_query.cols();
  const std::size_t k = head.clusters.rows();
  if (d == 0 || d_h == 0 || k == 0) {
    throw DomainError("AttentionHead: d, d_h and k must all be at least 1");
  }
  auto expect = [](const Matrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c) {
      std::ostringstream oss;
      oss << "AttentionHead: " << name << " is " << m.shape_string() << ", expected " << r
          << "x" << c;
      throw ShapeError(oss.str());
    }
  };
  expect(head.w_key, d, d_h, "w_key");
  expect(head.w_value, d, d_h, "w_value");
  expect(head.mlp_w1, d_h, d_h, "mlp_w1");
  expect(head.mlp_w2, d_h, d_h, "mlp_w2");
  expect(head.mlp_b1, 1, d_h, "mlp_b1");
  expect(head.mlp_b2, 1, d_h, "mlp_b2");
  expect(head.clusters, k, d_h, "clusters");
  if (!(head.delta >= 0.0 && head.delta <= 1.0)) {
    throw DomainError("AttentionHead: delta must lie in [0, 1]");
  }
}

namespace {

void mlp_forward(const AttentionHead& head, const Matrix& in, Matrix& pre, Matrix& hidden,
                 Matrix& out) {
  pre = matmul(in, head.mlp_w1);
  add_row_inplace(pre, head.mlp_b1);
  hidden = relu(pre);
  out = matmul(hidden, head.mlp_w2);
  add_row_inplace(out, head.mlp_b2);
}

// Returns the gradient wrt the MLP input and accumulates weight gradients.
Matrix mlp_backward(const AttentionHead& head, const Matrix& in, const Matrix& pre,
                    const Matrix& hidden, const Matrix& grad_out, HeadGradients& g) {
  add_inplace(g.mlp_w2, matmul_tn(hidden, grad_out));
  add_inplace(g.mlp_b2, column_sums(grad_out));
  Matrix grad_hidden = matmul_nt(grad_out, head.mlp_w2);
  for (std::size_t i = 0; i < grad_hidden.size(); ++i)
    if (pre[i] <= 0.0) grad_hidden[i] = 0.0;
  add_inplace(g.mlp_w1, matmul_tn(in, grad_hidden));
  add_inplace(g.mlp_b1, column_sums(grad_hidden));
  return matmul_nt(grad_hidden, head.mlp_w1);
}

void zero_invalid_rows(Matrix& m, const std::vector<std::uint8_t>& valid) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    if (!valid[i]) std::fill(m.row(i).begin(), m.row(i).end(), 0.0);
}

}  // namespace

SbmInference infer_sbm(const AttentionHead& head, const Matrix& q, const Matrix& k) {
  validate(head);
  const std::size_t d_h = head.head_dim();
  if (q.cols() != d_h || k.cols() != d_h) {
    throw ShapeError("infer_sbm: Q " + q.shape_string() + " and K " + k.shape_string() +
                     " must have " + std::to_string(d_h) + " columns");
  }
  SbmInference out;
  mlp_forward(head, q, out.mlp_pre_q, out.mlp_hidden_q, out.node_q);
  mlp_forward(head, k, out.mlp_pre_k, out.mlp_hidden_k, out.node_k);
  out.params.y = sigmoid(matmul_nt(out.node_q, head.clusters));
  out.params.z = sigmoid(matmul_nt(out.node_k, head.clusters));
  out.params.b = softmax_all(matmul_nt(head.clusters, head.clusters));
  return out;
}

HeadForwardTrace head_forward(const AttentionHead& head, const Matrix& x, Rng& rng,
                              const HeadForwardOptions& options) {
  validate(head);
  if (x.cols() != head.model_dim()) {
    throw ShapeError("head_forward: input " + x.shape_string() + " for model dim " +
                     std::to_string(head.model_dim()));
  }
  const std::size_t n = x.rows();
  const std::size_t d_h = head.head_dim();
  const std::size_t k = head.num_clusters();

  HeadForwardTrace t;
  t.x = x;
  t.q = matmul(x, head.w_query);
  t.k = matmul(x, head.w_key);
  t.v = matmul(x, head.w_value);
  t.sbm = infer_sbm(head, t.q, t.k);

  if (options.valid.empty()) {
    t.valid.assign(n, 1);
  } else {
    if (options.valid.size() != n) {
      throw ShapeError("head_forward: validity flags for " +
                       std::to_string(options.valid.size()) + " positions, input has " +
                       std::to_string(n));
    }
    t.valid.assign(options.valid.begin(), options.valid.end());
  }

  // Memberships of padded positions are zeroed so they carry no intensity.
  SbmParams sampling = t.sbm.params;
  zero_invalid_rows(sampling.y, t.valid);
  zero_invalid_rows(sampling.z, t.valid);

  SampleStats stats;
  if (options.injected_mask != nullptr) {
    if (options.injected_mask->n_q() != n || options.injected_mask->n_k() != n) {
      throw ShapeError("head_forward: injected mask does not match sequence length");
    }
    t.mask = *options.injected_mask;
  } else {
    SbmParams draw_from = sampling;
    if (options.training && head.delta > 0.0) {
      draw_from = with_exploration(sampling, head.delta);
      zero_invalid_rows(draw_from.y, t.valid);
      zero_invalid_rows(draw_from.z, t.valid);
    }
    t.mask = options.edge_law == EdgeLaw::kExact
                 ? sample_mask_exact(draw_from, rng, options.probability_cap, &stats)
                 : sample_mask(draw_from, rng, &stats);
    if (head.self_loops) t.mask = add_self_loops(t.mask);
  }

  const std::size_t m = t.mask.num_edges();
  if (options.ste_anchor != nullptr && options.ste_anchor->size() != m) {
    throw ShapeError("head_forward: surrogate anchor has " +
                     std::to_string(options.ste_anchor->size()) + " entries for " +
                     std::to_string(m) + " edges");
  }

  // Per-edge probabilities p = (Q̂Ŝ)ᵢ · K̂ⱼ.
  const Matrix row_block = matmul(sampling.y, sampling.b);
  t.edge_prob.resize(m);
  t.edge_logit.resize(m);
  t.edge_scale.assign(m, 1.0);
  t.edge_weight.resize(m);
  t.edge_keep.assign(m, 1.0);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_h));
  const auto& edges = t.mask.edges();
  for (std::size_t e = 0; e < m; ++e) {
    const auto rb = row_block.row(edges[e].query);
    const auto kh = sampling.z.row(edges[e].key);
    double p = 0.0;
    for (std::size_t u = 0; u < k; ++u) p += rb[u] * kh[u];
    t.edge_prob[e] = p;
    const auto qi = t.q.row(edges[e].query);
    const auto kj = t.k.row(edges[e].key);
    double dot = 0.0;
    for (std::size_t c = 0; c < d_h; ++c) dot += qi[c] * kj[c];
    if (options.count_ops) {
      ++t.counters.dot_products;
      t.counters.dot_macs += d_h;
    }
    t.edge_logit[e] = dot * inv_sqrt;
    if (options.ste_anchor != nullptr) t.edge_scale[e] = 1.0 + p - (*options.ste_anchor)[e];
  }

  const bool dropout = options.training && options.attention_dropout > 0.0;
  if (dropout && options.dropout_rng == nullptr) {
    throw DomainError("head_forward: attention dropout requires a dropout stream");
  }
  const double keep_scale = dropout ? 1.0 / (1.0 - options.attention_dropout) : 1.0;

  t.output = Matrix(n, d_h);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t begin = t.mask.row_offsets()[i];
    const std::size_t end = t.mask.row_offsets()[i + 1];
    if (begin == end) continue;  // isolated query: zero output row
    double mx = -INFINITY;
    for (std::size_t e = begin; e < end; ++e)
      mx = std::max(mx, t.edge_logit[e] * t.edge_scale[e]);
    double z = 0.0;
    for (std::size_t e = begin; e < end; ++e) {
      t.edge_weight[e] = std::exp(t.edge_logit[e] * t.edge_scale[e] - mx);
      z += t.edge_weight[e];
    }
    auto out = t.output.row(i);
    for (std::size_t e = begin; e < end; ++e) {
      t.edge_weight[e] /= z;
      if (dropout) {
        t.edge_keep[e] =
            options.dropout_rng->uniform() < options.attention_dropout ? 0.0 : keep_scale;
      }
      const double w = t.edge_weight[e] * t.edge_keep[e];
      if (w == 0.0) continue;
      const auto vj = t.v.row(edges[e].key);
      for (std::size_t c = 0; c < d_h; ++c) out[c] += w * vj[c];
      if (options.count_ops) t.counters.pool_macs += d_h;
    }
  }

  t.density = mask_density(t.mask);
  t.mask_mass = 0.0;
  for (double s : t.edge_scale) t.mask_mass += s;

  if (options.count_ops) {
    OpCounters& c = t.counters;
    c.enabled = true;
    c.membership_macs = 2 * (2 * n * d_h * d_h + n * d_h * k);
    c.block_macs = k * k * d_h;
    c.edge_prob_macs = n * k * k + m * k;
    c.sampling_ops = stats.raw_edges + stats.alias_build_ops + stats.intensity_evals;
    c.softmax_flops = 5 * m;
    c.peak_live_floats = 2 * m + 2 * n * d_h + 2 * n * k + k * d_h + k * k;
  }
  return t;
}

HeadGradients HeadGradients::zeros_like(const AttentionHead& head, std::size_t n) {
  HeadGradients g;
  g.w_query = Matrix(head.w_query.rows(), head.w_query.cols());
  g.w_key = Matrix(head.w_key.rows(), head.w_key.cols());
  g.w_value = Matrix(head.w_value.rows(), head.w_value.cols());
  g.mlp_w1 = Matrix(head.mlp_w1.rows(), head.mlp_w1.cols());
  g.mlp_b1 = Matrix(1, head.mlp_b1.cols());
  g.mlp_w2 = Matrix(head.mlp_w2.rows(), head.mlp_w2.cols());
  g.mlp_b2 = Matrix(1, head.mlp_b2.cols());
  g.clusters = Matrix(head.clusters.rows(), head.clusters.cols());
  g.x = Matrix(n, head.model_dim());
  return g;
}

HeadGradients head_backward(const HeadForwardTrace& trace, const AttentionHead& head,
                            const Matrix& grad_output, double lambda, std::size_t num_masks) {
  validate(head);
  const std::size_t n = trace.x.rows();
  const std::size_t d_h = head.head_dim();
  const std::size_t k = head.num_clusters();
  if (trace.x.cols() != head.model_dim() || trace.q.cols() != d_h ||
      trace.sbm.params.b.rows() != k || trace.mask.n_q() != n ||
      trace.edge_weight.size() != trace.mask.num_edges()) {
    throw ConsistencyError("head_backward: trace was not produced by this head");
  }
  if (grad_output.rows() != n || grad_output.cols() != d_h) {
    throw ShapeError("head_backward: grad_output " + grad_output.shape_string() +
                     " for head output " + trace.output.shape_string());
  }
  if (num_masks == 0) throw DomainError("head_backward: num_masks must be positive");

  HeadGradients g = HeadGradients::zeros_like(head, n);
  const std::size_t m = trace.mask.num_edges();
  const auto& edges = trace.mask.edges();
  g.edge_grad_logit.assign(m, 0.0);
  g.edge_grad_prob.assign(m, 0.0);

  Matrix grad_q(n, d_h), grad_k(n, d_h), grad_v(n, d_h);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_h));
  const double density_grad =
      lambda / (static_cast<double>(num_masks) * static_cast<double>(trace.mask.n_q()) *
                static_cast<double>(trace.mask.n_k()));
  std::vector<double> grad_weight;

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t begin = trace.mask.row_offsets()[i];
    const std::size_t end = trace.mask.row_offsets()[i + 1];
    if (begin == end) continue;
    const auto go = grad_output.row(i);
    grad_weight.assign(end - begin, 0.0);
    double weighted = 0.0;
    for (std::size_t e = begin; e < end; ++e) {
      const std::size_t j = edges[e].key;
      const auto vj = trace.v.row(j);
      double dot = 0.0;
      for (std::size_t c = 0; c < d_h; ++c) dot += go[c] * vj[c];
      const double keep = trace.edge_keep[e];
      grad_weight[e - begin] = dot * keep;
      weighted += trace.edge_weight[e] * grad_weight[e - begin];
      const double w = trace.edge_weight[e] * keep;
      if (w != 0.0) {
        auto gv = grad_v.row(j);
        for (std::size_t c = 0; c < d_h; ++c) gv[c] += w * go[c];
      }
    }
    const auto qi = trace.q.row(i);
    auto gqi = grad_q.row(i);
    for (std::size_t e = begin; e < end; ++e) {
      const std::size_t j = edges[e].key;
      const double grad_logit = trace.edge_weight[e] * (grad_weight[e - begin] - weighted);
      g.edge_grad_logit[e] = grad_logit;
      g.edge_grad_prob[e] = grad_logit * trace.edge_logit[e] + density_grad;
      const double grad_score = grad_logit * trace.edge_scale[e] * inv_sqrt;
      if (grad_score == 0.0) continue;
      const auto kj = trace.k.row(j);
      auto gkj = grad_k.row(j);
      for (std::size_t c = 0; c < d_h; ++c) {
        gqi[c] += grad_score * kj[c];
        gkj[c] += grad_score * qi[c];
      }
    }
  }

  // Straight-through branch: route ∂L/∂p through p = Q̂ᵢ Ŝ K̂ⱼᵀ.
  const Matrix& q_hat = trace.sbm.params.y;
  const Matrix& k_hat = trace.sbm.params.z;
  const Matrix& s_hat = trace.sbm.params.b;
  Matrix q_mem = q_hat, k_mem = k_hat;
  zero_invalid_rows(q_mem, trace.valid);
  zero_invalid_rows(k_mem, trace.valid);
  const Matrix row_block = matmul(q_mem, s_hat);     // (Q̂Ŝ)ᵢ
  const Matrix col_block = matmul_nt(k_mem, s_hat);  // (K̂Ŝᵀ)ⱼ
  Matrix grad_q_mem(n, k), grad_k_mem(n, k), weighted_keys(n, k);
  bool any_prob_grad = false;
  for (std::size_t e = 0; e < m; ++e) {
    // p is clamped to 1 on the gradient path; above the clamp it is flat.
    const double gp = trace.edge_prob[e] <= 1.0 ? g.edge_grad_prob[e] : 0.0;
    if (gp == 0.0) continue;
    any_prob_grad = true;
    const std::size_t i = edges[e].query, j = edges[e].key;
    const auto cb = col_block.row(j);
    const auto rb = row_block.row(i);
    const auto kj = k_mem.row(j);
    auto gq = grad_q_mem.row(i);
    auto gk = grad_k_mem.row(j);
    auto wk = weighted_keys.row(i);
    for (std::size_t u = 0; u < k; ++u) {
      gq[u] += gp * cb[u];
      gk[u] += gp * rb[u];
      wk[u] += gp * kj[u];
    }
  }

  if (any_prob_grad) {
    zero_invalid_rows(grad_q_mem, trace.valid);
    zero_invalid_rows(grad_k_mem, trace.valid);
    const Matrix grad_s = matmul_tn(q_mem, weighted_keys);
    const Matrix grad_gram = softmax_all_backward(s_hat, grad_s);
    // Gram = C Cᵀ → dC = (dG + dGᵀ) C.
    add_inplace(g.clusters, matmul(add(grad_gram, transpose(grad_gram)), head.clusters));

    auto membership_backward = [&](const Matrix& mem, const Matrix& grad_mem,
                                   const Matrix& node) {
      Matrix grad_logits(mem.rows(), mem.cols());
      for (std::size_t idx = 0; idx < mem.size(); ++idx)
        grad_logits[idx] = grad_mem[idx] * mem[idx] * (1.0 - mem[idx]);
      add_inplace(g.clusters, matmul_tn(grad_logits, node));
      return matmul(grad_logits, head.clusters);  // ∂L/∂node
    };
    const Matrix grad_node_q = membership_backward(q_hat, grad_q_mem, trace.sbm.node_q);
    const Matrix grad_node_k = membership_backward(k_hat, grad_k_mem, trace.sbm.node_k);
    add_inplace(grad_q, mlp_backward(head, trace.q, trace.sbm.mlp_pre_q,
                                     trace.sbm.mlp_hidden_q, grad_node_q, g));
    add_inplace(grad_k, mlp_backward(head, trace.k, trace.sbm.mlp_pre_k,
                                     trace.sbm.mlp_hidden_k, grad_node_k, g));
  }

  g.w_query = matmul_tn(trace.x, grad_q);
  g.w_key = matmul_tn(trace.x, grad_k);
  g.w_value = matmul_tn(trace.x, grad_v);
  g.x = matmul_nt(grad_q, head.w_query);
  add_inplace(g.x, matmul_nt(grad_k, head.w_key));
  add_inplace(g.x, matmul_nt(grad_v, head.w_value));
  return g;
}

double density_loss(std::span<const EdgeMask> masks) {
  if (masks.empty()) throw DomainError("density_loss: no masks");
  double total = 0.0;
  for (const EdgeMask& mask : masks) total += mask_density(mask);
  return total / static_cast<double>(masks.size());
}

}  // namespace sbmt
