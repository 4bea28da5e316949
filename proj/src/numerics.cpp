#include "sbmt/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sbmt/errors.hpp"

namespace sbmt {

Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (double& v : o) v /= z;
  }
  return out;
}

Matrix softmax_all(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  if (a.empty()) return out;
  const double mx = *std::max_element(a.values().begin(), a.values().end());
  double z = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = std::exp(a[i] - mx);
    z += out[i];
  }
  for (auto& v : out.values()) v /= z;
  return out;
}

Matrix softmax_all_backward(const Matrix& y, const Matrix& grad_y) {
  require_same_shape(y, grad_y, "softmax_all_backward");
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * grad_y[i];
  Matrix out(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] * (grad_y[i] - dot);
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix sigmoid(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = sigmoid(a[i]);
  return out;
}

Matrix relu(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return out;
}

BceResult bce_loss(const Matrix& logits, const Matrix& targets, const Matrix* mask) {
  require_same_shape(logits, targets, "bce_loss");
  if (mask != nullptr) require_same_shape(logits, *mask, "bce_loss mask");
  BceResult res;
  res.grad = Matrix(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask != nullptr && (*mask)[i] == 0.0) continue;
    ++res.count;
  }
  if (res.count == 0) return res;
  const double inv = 1.0 / static_cast<double>(res.count);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask != nullptr && (*mask)[i] == 0.0) continue;
    const double x = logits[i];
    const double t = targets[i];
    // log(1 + e^{-|x|}) + max(x, 0) − x·t
    total += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    res.grad[i] = (sigmoid(x) - t) * inv;
  }
  res.loss = total * inv;
  return res;
}

AdamState AdamState::for_param(const Matrix& param, double learning_rate) {
  AdamState s;
  s.first_moment = Matrix(param.rows(), param.cols());
  s.second_moment = Matrix(param.rows(), param.cols());
  s.learning_rate = learning_rate;
  return s;
}

void adam_update(Matrix& param, const Matrix& grad, AdamState& state) {
  require_same_shape(param, grad, "adam_update");
  require_same_shape(param, state.first_moment, "adam_update first moment");
  require_same_shape(param, state.second_moment, "adam_update second moment");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    const double m_hat = m / c1;
    const double v_hat = v / c2;
    param[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps,
                  LayerNormCache* cache) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) {
    throw ShapeError("layer_norm: gain " + gain.shape_string() + " for input " +
                     x.shape_string());
  }
  require_same_shape(gain, bias, "layer_norm gain/bias");
  const std::size_t n = x.rows(), d = x.cols();
  Matrix out(n, d);
  Matrix normalized(n, d);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      normalized(i, j) = (r[j] - mean) * is;
      out(i, j) = normalized(i, j) * gain[j] + bias[j];
    }
  }
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

Matrix layer_norm_backward(const Matrix& grad_out, const Matrix& gain,
                           const LayerNormCache& cache, Matrix& grad_gain, Matrix& grad_bias) {
  require_same_shape(grad_out, cache.normalized, "layer_norm_backward");
  const std::size_t n = grad_out.rows(), d = grad_out.cols();
  Matrix dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double g = grad_out(i, j);
      const double xh = cache.normalized(i, j);
      grad_gain[j] += g * xh;
      grad_bias[j] += g;
      dxhat[j] = g * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xh;
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx(i, j) = cache.inv_std[i] *
                 (dxhat[j] - mean_dxhat - cache.normalized(i, j) * mean_dxhat_xhat);
    }
  }
  return dx;
}

void fill_normal(Matrix& m, Rng& rng, double std) {
  for (auto& v : m.values()) v = std * rng.normal();
}

void fill_kaiming_normal(Matrix& m, Rng& rng, std::size_t fan_in) {
  if (fan_in == 0) throw DomainError("fill_kaiming_normal: fan_in must be positive");
  fill_normal(m, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

FiniteDiffReport finite_diff_check(const std::function<double(const Matrix&)>& f,
                                   Matrix& param, const Matrix& analytic,
                                   const FiniteDiffOptions& options) {
  require_same_shape(param, analytic, "finite_diff_check");
  if (!(options.step > 0.0)) throw DomainError("finite_diff_check: step must be positive");
  FiniteDiffReport report;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + options.step;
    const double up = f(param);
    param[i] = saved - options.step;
    const double down = f(param);
    param[i] = saved;
    const double numeric = (up - down) / (2.0 * options.step);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
    if (!(rel <= options.tolerance)) {
      report.passed = false;
      report.failing_indices.push_back(i);
    }
  }
  return report;
}

}  // namespace sbmt
