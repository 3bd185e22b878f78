#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hem/matrix.hpp"

// Gaussian mixture kernels with isotropic covariance σ²I and uniform mixing
// weights: E-step, M-step, N-step (damped Newton M-step), R-step, and the
// ELBO / log-likelihood they are measured against.
namespace hem::gmm {

enum class Kernel { Rbf, Dot };

const char* to_string(Kernel kernel);
Kernel kernel_from_string(const std::string& name);

/// Column mass below which a component is considered dead.
inline constexpr double kMinComponentMass = 1e-8;

struct GmmParams {
  Matrix bases;        // K×C
  double temperature;  // σ² > 0

  GmmParams(Matrix bases, double temperature);
};

struct ElboValue {
  double expected_complete_ll = 0.0;  // Q
  double entropy = 0.0;               // H
  double total = 0.0;                 // Q + H
};

/// Logits whose row softmax is the E-step output.
///   Rbf: -||x_n - mu_k||² / (2σ²)  (exact posterior of N(mu_k, σ²I))
///   Dot: x_n·mu_k / σ²
Matrix e_step_logits(const Matrix& x, const GmmParams& params, Kernel kernel);

Matrix e_step(const Matrix& x, const GmmParams& params, Kernel kernel);

/// Responsibility-weighted means. Throws DegenerateComponentError for the
/// first component whose mass N_k falls below kMinComponentMass.
Matrix m_step(const Matrix& gamma, const Matrix& x);

/// Weighted means for the live components only; rows of dead components are
/// left at zero and their indices returned through `dead`.
Matrix m_step_partial(const Matrix& gamma, const Matrix& x, std::vector<std::size_t>& dead);

/// (1-eta)·mu_old + eta·mu_em. eta must lie in [0, 1].
Matrix n_step(const Matrix& mu_old, const Matrix& mu_em, double eta);

/// X̃ = gamma·mu.
Matrix r_step(const Matrix& gamma, const Matrix& mu);

ElboValue elbo(const Matrix& x, const GmmParams& params, const Matrix& gamma);

double log_likelihood(const Matrix& x, const GmmParams& params);

/// Throws unless every row of gamma sums to 1 within `tol` and entries lie in [0,1].
void check_row_stochastic(const Matrix& gamma, double tol = 1e-9);

}  // namespace hem::gmm
