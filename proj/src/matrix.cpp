#include "sbmt/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sbmt/errors.hpp"

namespace sbmt {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    std::ostringstream oss;
    oss << "matrix data length " << data_.size() << " does not match shape " << rows << "x"
        << cols;
    throw ShapeError(oss.str());
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged initializer for Matrix");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + a.shape_string() + " x " + b.shape_string());
  }
  const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = &out(i, 0);
    for (std::size_t p = 0; p < inner; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const double* br = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: shape mismatch " + a.shape_string() + "^T x " +
                     b.shape_string());
  }
  const std::size_t n = a.cols(), inner = a.rows(), m = b.cols();
  Matrix out(n, m);
  for (std::size_t p = 0; p < inner; ++p) {
    const double* ar = a.row(p).data();
    const double* br = b.row(p).data();
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* o = &out(i, 0);
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: shape mismatch " + a.shape_string() + " x " +
                     b.shape_string() + "^T");
  }
  // Transposing first keeps the inner loop a contiguous axpy.
  return matmul(a, transpose(b));
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

void add_inplace(Matrix& dst, const Matrix& src) {
  require_same_shape(dst, src, "add_inplace");
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void axpy_inplace(Matrix& dst, double alpha, const Matrix& src) {
  require_same_shape(dst, src, "axpy_inplace");
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += alpha * s[i];
}

void add_row_inplace(Matrix& dst, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != dst.cols()) {
    throw ShapeError("add_row_inplace: bias " + bias.shape_string() + " for " +
                     dst.shape_string());
  }
  for (std::size_t i = 0; i < dst.rows(); ++i) {
    auto r = dst.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

Matrix column_sums(const Matrix& a) {
  Matrix out(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j];
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  add_inplace(out, b);
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (auto& v : out.values()) v *= s;
  return out;
}

double sum(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

bool all_finite(const Matrix& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](double v) { return std::isfinite(v); });
}

Matrix slice_cols(const Matrix& a, std::size_t col_begin, std::size_t width) {
  if (col_begin + width > a.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(col_begin) + ", " +
                     std::to_string(col_begin + width) + ") out of " + a.shape_string());
  }
  Matrix out(a.rows(), width);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < width; ++j) out(i, j) = a(i, col_begin + j);
  return out;
}

void set_cols(Matrix& dst, std::size_t col_begin, const Matrix& block) {
  if (block.rows() != dst.rows() || col_begin + block.cols() > dst.cols()) {
    throw ShapeError("set_cols: block " + block.shape_string() + " does not fit " +
                     dst.shape_string() + " at column " + std::to_string(col_begin));
  }
  for (std::size_t i = 0; i < dst.rows(); ++i)
    for (std::size_t j = 0; j < block.cols(); ++j) dst(i, col_begin + j) = block(i, j);
}

}  // namespace sbmt
