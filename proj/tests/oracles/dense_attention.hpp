#pragma once

// Dense O(n²) reference for one SBM attention head. Written with plain loops
// so it shares no kernels with the library beyond the Matrix container.

#include <cmath>
#include <limits>
#include <vector>

#include "sbmt/attention.hpp"

namespace oracle {

using sbmt::Matrix;

inline Matrix mm(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      out(i, j) = s;
    }
  return out;
}

inline Matrix mm_bt(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(j, p);
      out(i, j) = s;
    }
  return out;
}

inline Matrix shared_mlp(const sbmt::AttentionHead& h, const Matrix& in) {
  Matrix hidden = mm(in, h.mlp_w1);
  for (std::size_t i = 0; i < hidden.rows(); ++i)
    for (std::size_t c = 0; c < hidden.cols(); ++c)
      hidden(i, c) = std::max(0.0, hidden(i, c) + h.mlp_b1(0, c));
  Matrix out = mm(hidden, h.mlp_w2);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t c = 0; c < out.cols(); ++c) out(i, c) += h.mlp_b2(0, c);
  return out;
}

inline Matrix logistic(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a[i]));
  return out;
}

// Expected mask Q̂ Ŝ K̂ᵀ, with rows/columns of invalid positions zeroed.
inline Matrix expected_mask(const sbmt::AttentionHead& h, const Matrix& x,
                            const std::vector<std::uint8_t>& valid = {}) {
  const Matrix q = mm(x, h.w_query), k = mm(x, h.w_key);
  Matrix qh = logistic(mm_bt(shared_mlp(h, q), h.clusters));
  Matrix kh = logistic(mm_bt(shared_mlp(h, k), h.clusters));
  Matrix gram = mm_bt(h.clusters, h.clusters);
  double mx = -std::numeric_limits<double>::infinity(), z = 0.0;
  for (double v : gram.values()) mx = std::max(mx, v);
  for (auto& v : gram.values()) z += (v = std::exp(v - mx));
  for (auto& v : gram.values()) v /= z;
  Matrix p = mm_bt(mm(qh, gram), kh);
  if (!valid.empty())
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j)
        if (!valid[i] || !valid[j]) p(i, j) = 0.0;
  return p;
}

// Attention with logits QKᵀ/√d_h · scale, −∞ where mask == 0. Rows with no
// unmasked entries produce zeros. scale defaults to all ones.
inline Matrix attend(const sbmt::AttentionHead& h, const Matrix& x, const Matrix& mask,
                     const Matrix* scale = nullptr) {
  const Matrix q = mm(x, h.w_query), k = mm(x, h.w_key), v = mm(x, h.w_value);
  const std::size_t n = x.rows();
  const double r = 1.0 / std::sqrt(static_cast<double>(h.head_dim()));
  Matrix out(n, h.head_dim());
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < h.head_dim(); ++c) s += q(i, c) * k(j, c);
      s *= r * (scale ? (*scale)(i, j) : 1.0);
      row[j] = mask(i, j) != 0.0 ? s : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, row[j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < h.head_dim(); ++c) out(i, c) += row[j] / z * v(j, c);
  }
  return out;
}

inline Matrix dense_mask(const sbmt::EdgeMask& m) {
  Matrix out(m.n_q(), m.n_k());
  for (const auto& e : m.edges()) out(e.query, e.key) = 1.0;
  return out;
}

// Surrogate objective used for gradient checks: ⟨W, output⟩ with each
// sampled logit scaled by m̃ = 1 + p − anchor, plus λ/num_masks · Σm̃ / n².
// anchor is the expected mask evaluated at the reference parameters.
inline double surrogate_loss(const sbmt::AttentionHead& h, const Matrix& x,
                             const Matrix& mask, const Matrix& anchor, const Matrix& weights,
                             double lambda, std::size_t num_masks,
                             const std::vector<std::uint8_t>& valid = {}) {
  const Matrix p = expected_mask(h, x, valid);
  Matrix scale(mask.rows(), mask.cols(), 1.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] != 0.0) {
      scale[i] = 1.0 + p[i] - anchor[i];
      mass += scale[i];
    }
  const Matrix out = attend(h, x, mask, &scale);
  double total = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) total += weights[i] * out[i];
  return total + lambda / static_cast<double>(num_masks) * mass /
                     static_cast<double>(mask.rows() * mask.cols());
}

}  // namespace oracle
