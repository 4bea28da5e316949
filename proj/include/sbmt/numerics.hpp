#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "sbmt/matrix.hpp"
#include "sbmt/rng.hpp"

namespace sbmt {

// Row-wise softmax with per-row max subtraction.
Matrix softmax_rows(const Matrix& a);
// Softmax over every entry of the matrix (sum of all outputs is 1).
Matrix softmax_all(const Matrix& a);
// Backward of softmax_all given its output y: dX = y ⊙ (dY − Σ y⊙dY).
Matrix softmax_all_backward(const Matrix& y, const Matrix& grad_y);

Matrix sigmoid(const Matrix& a);
Matrix relu(const Matrix& a);
double sigmoid(double x);

struct BceResult {
  double loss = 0.0;
  Matrix grad;  // d loss / d logits
  std::size_t count = 0;  // positions that contributed
};

// Mean binary cross-entropy with logits over positions where mask != 0
// (all positions when mask is absent). The gradient is of the mean.
BceResult bce_loss(const Matrix& logits, const Matrix& targets,
                   const Matrix* mask = nullptr);

struct AdamState {
  Matrix first_moment;
  Matrix second_moment;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 1e-3;

  static AdamState for_param(const Matrix& param, double learning_rate = 1e-3);
};

// One bias-corrected Adam step, in place on param and state.
void adam_update(Matrix& param, const Matrix& grad, AdamState& state);

struct LayerNormCache {
  Matrix normalized;  // x̂
  std::vector<double> inv_std;
};

// Per-row layer normalization with gain and bias (both 1×cols).
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps,
                  LayerNormCache* cache);
// Returns dX; accumulates into grad_gain and grad_bias.
Matrix layer_norm_backward(const Matrix& grad_out, const Matrix& gain,
                           const LayerNormCache& cache, Matrix& grad_gain, Matrix& grad_bias);

// Fills with N(0, std²).
void fill_normal(Matrix& m, Rng& rng, double std);
// Kaiming-normal (fan-in, ReLU gain): std = sqrt(2 / fan_in).
void fill_kaiming_normal(Matrix& m, Rng& rng, std::size_t fan_in);

struct FiniteDiffReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::vector<std::size_t> failing_indices;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct FiniteDiffOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  // Relative error is |a − n| / max(|a|, |n|, abs_floor); the floor keeps
  // entries whose true gradient is ~0 from dividing roundoff by zero.
  double abs_floor = 1e-6;
};

// Central differences on every entry of param; compares against analytic.
// param is perturbed and restored in place.
FiniteDiffReport finite_diff_check(const std::function<double(const Matrix&)>& f,
                                   Matrix& param, const Matrix& analytic,
                                   const FiniteDiffOptions& options = {});

}  // namespace sbmt
