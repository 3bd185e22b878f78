#pragma once

#include <vector>

#include "hem/matrix.hpp"

// Dense kernels used by every other module.
//
// The functions in hem::numerics parallelize over output rows with OpenMP.
// Each output entry is still reduced by a single thread in a fixed loop
// order, so results are bitwise identical to the reference kernels in
// hem::numerics::serial regardless of thread count.
namespace hem::numerics {

Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ·b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a·bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// Row-wise max-shifted softmax.
Matrix softmax_rows(const Matrix& logits);
std::vector<double> logsumexp_rows(const Matrix& logits);
/// Entry (n,k) = ||x_n - mu_k||².
Matrix squared_distances(const Matrix& x, const Matrix& mu);

Matrix transpose(const Matrix& a);

// Elementwise helpers. All are serial; they are O(size) and never dominate.
Matrix scaled(const Matrix& a, double s);
/// alpha·a + beta·b
Matrix axpby(double alpha, const Matrix& a, double beta, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
void add_in_place(Matrix& acc, const Matrix& b);
std::vector<double> column_sums(const Matrix& a);
std::vector<double> row_sums(const Matrix& a);
double max_abs(const Matrix& a);
double mean_abs(const Matrix& a);
double frobenius_norm(const Matrix& a);
double sum(const Matrix& a);

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix softmax_rows(const Matrix& logits);
std::vector<double> logsumexp_rows(const Matrix& logits);
Matrix squared_distances(const Matrix& x, const Matrix& mu);

}  // namespace serial

}  // namespace hem::numerics
