#include <cmath>

#include "doctest.h"
#include "sbmt/errors.hpp"
#include "sbmt/numerics.hpp"

using namespace sbmt;

TEST_CASE("matmul: identity, hand product, zero") {
  const Matrix a = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
  CHECK(matmul(Matrix::identity(3), a) == a);

  const Matrix prod = matmul(Matrix::from_rows({{1, 2}, {3, 4}}), Matrix::from_rows({{0}, {1}}));
  CHECK(prod == Matrix::from_rows({{2}, {4}}));

  CHECK(matmul(Matrix(3, 3), a) == Matrix(3, 3));
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("transposed products agree with explicit transposes") {
  Rng rng(3);
  Matrix a(4, 3), b(4, 5), c(6, 3);
  fill_normal(a, rng, 1.0);
  fill_normal(b, rng, 1.0);
  fill_normal(c, rng, 1.0);
  const Matrix tn = matmul_tn(a, b);
  const Matrix ref_tn = matmul(transpose(a), b);
  const Matrix nt = matmul_nt(a, c);
  const Matrix ref_nt = matmul(a, transpose(c));
  for (std::size_t i = 0; i < tn.size(); ++i) CHECK(tn[i] == doctest::Approx(ref_tn[i]).epsilon(1e-14));
  for (std::size_t i = 0; i < nt.size(); ++i) CHECK(nt[i] == doctest::Approx(ref_nt[i]).epsilon(1e-14));
}

TEST_CASE("softmax_rows examples") {
  const Matrix uniform = softmax_rows(Matrix(1, 3));
  for (double v : uniform.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Matrix big = softmax_rows(Matrix::from_rows({{1000, 0, 0}}));
  CHECK(std::abs(big[0] - 1.0) < 1e-12);
  CHECK(big[1] < 1e-12);

  // exp(k) / (e + e² + e³) evaluated at high precision.
  const Matrix r = softmax_rows(Matrix::from_rows({{1, 2, 3}}));
  CHECK(r[0] == doctest::Approx(0.0900305731703805).epsilon(1e-12));
  CHECK(r[1] == doctest::Approx(0.2447284710547977).epsilon(1e-12));
  CHECK(r[2] == doctest::Approx(0.6652409557748219).epsilon(1e-12));
}

TEST_CASE("softmax_rows rows sum to one on random inputs in [-50, 50]") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix a(7, 13);
    for (auto& v : a.values()) v = -50.0 + 100.0 * rng.uniform();
    const Matrix s = softmax_rows(a);
    for (std::size_t i = 0; i < s.rows(); ++i) {
      double total = 0.0;
      for (double v : s.row(i)) {
        CHECK(v >= 0.0);
        total += v;
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax_all examples and invariant") {
  const Matrix quarter = softmax_all(Matrix(2, 2));
  for (double v : quarter.values()) CHECK(v == doctest::Approx(0.25));
  CHECK(softmax_all(Matrix::from_rows({{-123.0}}))[0] == 1.0);
  const Matrix s = softmax_all(Matrix::from_rows({{0, std::log(3.0)}, {0, 0}}));
  CHECK(s[0] == doctest::Approx(1.0 / 6.0).epsilon(1e-14));
  CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(s[2] == doctest::Approx(1.0 / 6.0).epsilon(1e-14));
  CHECK(s[3] == doctest::Approx(1.0 / 6.0).epsilon(1e-14));

  Rng rng(5);
  Matrix a(9, 9);
  for (auto& v : a.values()) v = -50.0 + 100.0 * rng.uniform();
  CHECK(std::abs(sum(softmax_all(a)) - 1.0) < 1e-12);
}

TEST_CASE("softmax_all_backward matches finite differences") {
  Rng rng(8);
  Matrix a(3, 3), weights(3, 3);
  fill_normal(a, rng, 1.0);
  fill_normal(weights, rng, 1.0);
  auto f = [&](const Matrix& x) {
    const Matrix y = softmax_all(x);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += weights[i] * y[i];
    return s;
  };
  const Matrix analytic = softmax_all_backward(softmax_all(a), weights);
  const auto report = finite_diff_check(f, a, analytic, {.step = 1e-5, .tolerance = 1e-7});
  CHECK(report.passed);
}

TEST_CASE("sigmoid and relu") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(std::log(3.0)) == doctest::Approx(0.75).epsilon(1e-15));
  const Matrix r = relu(Matrix::from_rows({{-2, 3}}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 3.0);
  const Matrix s = sigmoid(Matrix::from_rows({{-800, 800}}));
  CHECK(s[0] >= 0.0);
  CHECK(s[1] <= 1.0);
  CHECK(all_finite(s));
}

TEST_CASE("bce_loss values, masking and gradient") {
  const auto zero = bce_loss(Matrix::from_rows({{0.0}}), Matrix::from_rows({{1.0}}));
  CHECK(zero.loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  const auto confident = bce_loss(Matrix::from_rows({{60.0, 80.0}}), Matrix::from_rows({{1, 1}}));
  CHECK(confident.loss < 1e-20);

  const Matrix mask = Matrix::from_rows({{1, 0}});
  const auto masked =
      bce_loss(Matrix::from_rows({{0.0, 500.0}}), Matrix::from_rows({{1, 0}}), &mask);
  CHECK(masked.count == 1);
  CHECK(masked.loss == doctest::Approx(std::log(2.0)));
  CHECK(masked.grad[1] == 0.0);

  CHECK_THROWS_AS(bce_loss(Matrix(1, 2), Matrix(2, 1)), ShapeError);

  Rng rng(21);
  Matrix logits(4, 5), targets(4, 5);
  fill_normal(logits, rng, 3.0);
  for (auto& t : targets.values()) t = rng.bernoulli(0.5) ? 1.0 : 0.0;
  const auto res = bce_loss(logits, targets);
  auto f = [&](const Matrix& x) { return bce_loss(x, targets).loss; };
  const auto report =
      finite_diff_check(f, logits, res.grad, {.step = 1e-5, .tolerance = 1e-6});
  CHECK(report.passed);
}

TEST_CASE("adam_update") {
  Matrix param = Matrix::from_rows({{1.0, -2.0, 3.0}});
  const Matrix before = param;
  AdamState state = AdamState::for_param(param);
  adam_update(param, Matrix(1, 3), state);
  CHECK(param == before);
  CHECK(state.step == 1);

  // Step 1 with bias correction moves by lr·g/(|g|+ε).
  Matrix p2 = Matrix::from_rows({{0.5, 0.5}});
  AdamState s2 = AdamState::for_param(p2, 1e-3);
  const Matrix g = Matrix::from_rows({{0.2, -4.0}});
  adam_update(p2, g, s2);
  CHECK(p2[0] == doctest::Approx(0.5 - 1e-3 * 0.2 / (0.2 + 1e-8)).epsilon(1e-14));
  CHECK(p2[1] == doctest::Approx(0.5 + 1e-3 * 4.0 / (4.0 + 1e-8)).epsilon(1e-14));
  const double after_one = p2[0];
  adam_update(p2, g, s2);
  CHECK(p2[0] < after_one);
  CHECK(s2.step == 2);

  Matrix wrong(2, 2);
  CHECK_THROWS_AS(adam_update(wrong, Matrix(1, 2), s2), ShapeError);
}

TEST_CASE("layer_norm backward matches finite differences") {
  Rng rng(4);
  Matrix x(3, 6), gain(1, 6), bias(1, 6), weights(3, 6);
  fill_normal(x, rng, 2.0);
  fill_normal(gain, rng, 1.0);
  fill_normal(bias, rng, 1.0);
  fill_normal(weights, rng, 1.0);
  auto loss = [&](const Matrix& xx, const Matrix& gg, const Matrix& bb) {
    const Matrix y = layer_norm(xx, gg, bb, 1e-5, nullptr);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += weights[i] * y[i];
    return s;
  };
  LayerNormCache cache;
  layer_norm(x, gain, bias, 1e-5, &cache);
  Matrix grad_gain(1, 6), grad_bias(1, 6);
  const Matrix dx = layer_norm_backward(weights, gain, cache, grad_gain, grad_bias);
  FiniteDiffOptions opt{.step = 1e-5, .tolerance = 1e-6};
  CHECK(finite_diff_check([&](const Matrix& v) { return loss(v, gain, bias); }, x, dx, opt).passed);
  CHECK(finite_diff_check([&](const Matrix& v) { return loss(x, v, bias); }, gain, grad_gain, opt)
            .passed);
  CHECK(finite_diff_check([&](const Matrix& v) { return loss(x, gain, v); }, bias, grad_bias, opt)
            .passed);
}

TEST_CASE("finite_diff_check passes exact gradients and flags wrong ones") {
  Matrix x = Matrix::from_rows({{0.3, -1.2}, {2.0, 0.7}});
  auto half_sq = [](const Matrix& m) {
    double s = 0.0;
    for (double v : m.values()) s += 0.5 * v * v;
    return s;
  };
  CHECK(finite_diff_check(half_sq, x, x, {.tolerance = 1e-6}).passed);
  const auto bad = finite_diff_check(half_sq, x, scale(x, 2.0), {.tolerance = 1e-6});
  CHECK_FALSE(bad.passed);
  CHECK(bad.failing_indices.size() == 4);
  CHECK(bad.max_rel_error == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(x == Matrix::from_rows({{0.3, -1.2}, {2.0, 0.7}}));
}

TEST_CASE("kernels are deterministic") {
  Rng r1(9), r2(9);
  Matrix a(5, 5), b(5, 5);
  fill_normal(a, r1, 1.0);
  fill_normal(b, r2, 1.0);
  CHECK(a == b);
  CHECK(softmax_rows(a) == softmax_rows(b));
  CHECK(matmul(a, a) == matmul(b, b));
}

TEST_CASE("rng substreams and distributions") {
  Rng a = Rng::derive(42, {1, 2, 3});
  Rng b = Rng::derive(42, {1, 2, 3});
  Rng c = Rng::derive(42, {1, 2, 4});
  const auto va = a.next_u64();
  CHECK(va == b.next_u64());
  CHECK(va != c.next_u64());

  // Poisson mean and variance across both sampling regimes.
  for (double mean : {0.7, 12.0, 45.0, 400.0}) {
    Rng rng(static_cast<std::uint64_t>(mean * 100));
    const int n = 100000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = static_cast<double>(rng.poisson(mean));
      s += x;
      s2 += x * x;
    }
    const double m = s / n;
    const double var = s2 / n - m * m;
    CHECK(std::abs(m - mean) < 4.0 * std::sqrt(mean / n));
    CHECK(std::abs(var - mean) / mean < 0.03);
  }
}
