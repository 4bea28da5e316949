#pragma once

// Dense full-attention reference of the encoder forward (inference mode),
// built on the plain-loop head oracle.

#include <cmath>

#include "dense_attention.hpp"
#include "sbmt/encoder.hpp"

namespace oracle {

inline Matrix normalize_rows(const Matrix& x, const Matrix& gain, const Matrix& bias) {
  Matrix out(x.rows(), x.cols());
  const double d = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) mean += x(i, c);
    mean /= d;
    double var = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) var += (x(i, c) - mean) * (x(i, c) - mean);
    var /= d;
    for (std::size_t c = 0; c < x.cols(); ++c)
      out(i, c) = (x(i, c) - mean) / std::sqrt(var + 1e-5) * gain(0, c) + bias(0, c);
  }
  return out;
}

inline Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out = mm(x, w);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t c = 0; c < out.cols(); ++c) out(i, c) += b(0, c);
  return out;
}

// Logits for one sequence with every query attending every key.
inline std::vector<double> dense_logits(const sbmt::EncoderModel& m,
                                        const std::vector<std::uint32_t>& ids) {
  const std::size_t n = ids.size(), d = m.config.d, dh = m.config.head_dim();
  Matrix x(n, d);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < d; ++c)
      x(t, c) = m.token_embedding(ids[t], c) + m.position_embedding(t, c);
  const Matrix ones(n, n, 1.0);
  for (const auto& layer : m.layers) {
    Matrix concat(n, d);
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      const Matrix out = attend(layer.heads[h], x, ones);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < dh; ++c) concat(i, h * dh + c) = out(i, c);
    }
    Matrix r1 = affine(concat, layer.w_out, layer.b_out);
    for (std::size_t i = 0; i < r1.size(); ++i) r1[i] += x[i];
    const Matrix y1 = normalize_rows(r1, layer.ln1_gain, layer.ln1_bias);
    Matrix hidden = affine(y1, layer.ffn_w1, layer.ffn_b1);
    for (auto& v : hidden.values()) v = std::max(v, 0.0);
    Matrix r2 = affine(hidden, layer.ffn_w2, layer.ffn_b2);
    for (std::size_t i = 0; i < r2.size(); ++i) r2[i] += y1[i];
    x = normalize_rows(r2, layer.ln2_gain, layer.ln2_bias);
  }
  if (m.config.pooling == sbmt::Pooling::kMean) {
    Matrix pooled(1, d);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < d; ++c) pooled(0, c) += x(t, c) / static_cast<double>(n);
    return {affine(pooled, m.classifier_w, m.classifier_b)(0, 0)};
  }
  const Matrix logits = affine(x, m.classifier_w, m.classifier_b);
  return std::vector<double>(logits.values().begin(), logits.values().end());
}

}  // namespace oracle
