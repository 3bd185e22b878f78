#include "hem/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

namespace hem::numerics {

namespace {

// Below this many multiply-adds the OpenMP fork costs more than it saves.
constexpr std::int64_t kParallelWork = 1 << 15;

// Row kernels shared by the serial and parallel drivers. Each one writes a
// single output row and reads its inputs in a fixed order.

inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& out, std::size_t i) {
  auto dst = out.row(i);
  std::fill(dst.begin(), dst.end(), 0.0);
  for (std::size_t p = 0; p < a.cols(); ++p) {
    const double aip = a(i, p);
    const auto src = b.row(p);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += aip * src[j];
  }
}

inline void matmul_tn_row(const Matrix& a, const Matrix& b, Matrix& out, std::size_t k) {
  auto dst = out.row(k);
  std::fill(dst.begin(), dst.end(), 0.0);
  for (std::size_t n = 0; n < a.rows(); ++n) {
    const double ank = a(n, k);
    const auto src = b.row(n);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += ank * src[j];
  }
}

inline void matmul_nt_row(const Matrix& a, const Matrix& b, Matrix& out, std::size_t n) {
  const auto lhs = a.row(n);
  for (std::size_t k = 0; k < b.rows(); ++k) {
    const auto rhs = b.row(k);
    double acc = 0.0;
    for (std::size_t c = 0; c < lhs.size(); ++c) acc += lhs[c] * rhs[c];
    out(n, k) = acc;
  }
}

inline void softmax_row(const Matrix& logits, Matrix& out, std::size_t i) {
  const auto src = logits.row(i);
  auto dst = out.row(i);
  const double m = *std::max_element(src.begin(), src.end());
  double z = 0.0;
  for (std::size_t j = 0; j < src.size(); ++j) {
    dst[j] = std::exp(src[j] - m);
    z += dst[j];
  }
  for (double& v : dst) v /= z;
}

inline double logsumexp_row(const Matrix& logits, std::size_t i) {
  const auto src = logits.row(i);
  if (src.size() == 1) return src[0];
  const double m = *std::max_element(src.begin(), src.end());
  double z = 0.0;
  for (double v : src) z += std::exp(v - m);
  return m + std::log(z);
}

inline void sqdist_row(const Matrix& x, const Matrix& mu, Matrix& out, std::size_t n) {
  const auto xn = x.row(n);
  for (std::size_t k = 0; k < mu.rows(); ++k) {
    const auto mk = mu.row(k);
    double acc = 0.0;
    for (std::size_t c = 0; c < xn.size(); ++c) {
      const double d = xn[c] - mk[c];
      acc += d * d;
    }
    out(n, k) = acc;
  }
}

void check_rows_nonempty(const Matrix& m, const char* what) {
  if (m.rows() > 0 && m.cols() == 0) throw ShapeError(std::string(what) + ": zero columns");
}

std::int64_t work(std::size_t a, std::size_t b, std::size_t c) {
  return static_cast<std::int64_t>(a) * static_cast<std::int64_t>(b) *
         static_cast<std::int64_t>(c);
}

}  // namespace

// ---------------------------------------------------------------------------
// Serial reference kernels

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.rows(), "matmul: a.cols != b.rows");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a, b, out, i);
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require_shape(a.rows() == b.rows(), "matmul_tn: a.rows != b.rows");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.cols(); ++k) matmul_tn_row(a, b, out, k);
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.cols(), "matmul_nt: a.cols != b.cols");
  Matrix out(a.rows(), b.rows());
  for (std::size_t n = 0; n < a.rows(); ++n) matmul_nt_row(a, b, out, n);
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  check_rows_nonempty(logits, "softmax_rows");
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) softmax_row(logits, out, i);
  return out;
}

std::vector<double> logsumexp_rows(const Matrix& logits) {
  check_rows_nonempty(logits, "logsumexp_rows");
  std::vector<double> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = logsumexp_row(logits, i);
  return out;
}

Matrix squared_distances(const Matrix& x, const Matrix& mu) {
  require_shape(x.cols() == mu.cols(), "squared_distances: x.cols != mu.cols");
  Matrix out(x.rows(), mu.rows());
  for (std::size_t n = 0; n < x.rows(); ++n) sqdist_row(x, mu, out, n);
  return out;
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP kernels

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.rows(), "matmul: a.cols != b.rows");
  Matrix out(a.rows(), b.cols());
  const auto rows = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static) if (work(a.rows(), a.cols(), b.cols()) > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) matmul_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require_shape(a.rows() == b.rows(), "matmul_tn: a.rows != b.rows");
  Matrix out(a.cols(), b.cols());
  const auto rows = static_cast<std::int64_t>(a.cols());
#pragma omp parallel for schedule(static) if (work(a.rows(), a.cols(), b.cols()) > kParallelWork)
  for (std::int64_t k = 0; k < rows; ++k) matmul_tn_row(a, b, out, static_cast<std::size_t>(k));
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.cols(), "matmul_nt: a.cols != b.cols");
  Matrix out(a.rows(), b.rows());
  const auto rows = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static) if (work(a.rows(), a.cols(), b.rows()) > kParallelWork)
  for (std::int64_t n = 0; n < rows; ++n) matmul_nt_row(a, b, out, static_cast<std::size_t>(n));
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  check_rows_nonempty(logits, "softmax_rows");
  Matrix out(logits.rows(), logits.cols());
  const auto rows = static_cast<std::int64_t>(logits.rows());
#pragma omp parallel for schedule(static) if (work(logits.rows(), logits.cols(), 8) > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) softmax_row(logits, out, static_cast<std::size_t>(i));
  return out;
}

std::vector<double> logsumexp_rows(const Matrix& logits) {
  check_rows_nonempty(logits, "logsumexp_rows");
  std::vector<double> out(logits.rows());
  const auto rows = static_cast<std::int64_t>(logits.rows());
#pragma omp parallel for schedule(static) if (work(logits.rows(), logits.cols(), 8) > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
    out[static_cast<std::size_t>(i)] = logsumexp_row(logits, static_cast<std::size_t>(i));
  }
  return out;
}

Matrix squared_distances(const Matrix& x, const Matrix& mu) {
  require_shape(x.cols() == mu.cols(), "squared_distances: x.cols != mu.cols");
  Matrix out(x.rows(), mu.rows());
  const auto rows = static_cast<std::int64_t>(x.rows());
#pragma omp parallel for schedule(static) if (work(x.rows(), mu.rows(), x.cols()) > kParallelWork)
  for (std::int64_t n = 0; n < rows; ++n) sqdist_row(x, mu, out, static_cast<std::size_t>(n));
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise helpers

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix scaled(const Matrix& a, double s) {
  Matrix out(a.rows(), a.cols());
  auto dst = out.values();
  auto src = a.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = s * src[i];
  return out;
}

Matrix axpby(double alpha, const Matrix& a, double beta, const Matrix& b) {
  require_shape(a.same_shape(b), "axpby");
  Matrix out(a.rows(), a.cols());
  auto dst = out.values();
  auto lhs = a.values();
  auto rhs = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = alpha * lhs[i] + beta * rhs[i];
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_shape(a.same_shape(b), "add");
  Matrix out = a;
  add_in_place(out, b);
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  require_shape(a.same_shape(b), "subtract");
  Matrix out(a.rows(), a.cols());
  auto dst = out.values();
  auto lhs = a.values();
  auto rhs = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = lhs[i] - rhs[i];
  return out;
}

void add_in_place(Matrix& acc, const Matrix& b) {
  require_shape(acc.same_shape(b), "add_in_place");
  auto dst = acc.values();
  auto src = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::vector<double> column_sums(const Matrix& a) {
  std::vector<double> out(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j];
  }
  return out;
}

std::vector<double> row_sums(const Matrix& a) {
  std::vector<double> out(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (double v : a.row(i)) out[i] += v;
  }
  return out;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

double mean_abs(const Matrix& a) {
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (double v : a.values()) s += std::abs(v);
  return s / static_cast<double>(a.size());
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

double sum(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s;
}

}  // namespace hem::numerics
