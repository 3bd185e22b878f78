#pragma once

#include <functional>
#include <vector>

#include "hem/gmm.hpp"
#include "hem/matrix.hpp"
#include "hem/stack.hpp"

// Reverse-mode gradients through the highway-EM stack.
//
// Every step has a hand-written vector-Jacobian product. hem_backward chains
// them from the R-step down to mu^(0). In SkipOnly mode the E-step VJP is
// replaced by zero, which leaves exactly the gradient that travels along the
// (1-eta) skip connections and the direct x-dependence of each M-step.
namespace hem::backprop {

enum class GradMode { Exact, SkipOnly };

const char* to_string(GradMode mode);

struct HemGradients {
  Matrix grad_x;                                // dE/dX, N×C
  Matrix grad_mu0;                              // dE/dmu^(0), K×C
  std::vector<Matrix> per_layer_grad_mu;        // dE/dmu^(t), t = 1..T at [t-1]
  std::vector<Matrix> per_layer_grad_x_contrib; // layer-t summand of dE/dX, at [t-1]
};

struct EStepGrads {
  Matrix grad_x;
  Matrix grad_mu;
};

struct MStepGrads {
  Matrix grad_gamma;
  Matrix grad_x;
};

struct NStepGrads {
  Matrix grad_mu_old;
  Matrix grad_mu_em;
};

struct RStepGrads {
  Matrix grad_gamma;
  Matrix grad_mu;
};

EStepGrads vjp_e_step(const Matrix& x, const Matrix& mu, double sigma2, gmm::Kernel kernel,
                      const Matrix& gamma, const Matrix& upstream_gamma);

/// `mu_em` is the M-step output for (gamma, x); rows listed in `frozen` get no
/// gradient (reinitialized bases).
MStepGrads vjp_m_step(const Matrix& gamma, const Matrix& x, const Matrix& mu_em,
                      const Matrix& upstream_mu_em,
                      const std::vector<std::size_t>& frozen = {});

NStepGrads vjp_n_step(const Matrix& upstream_mu_new, double eta);

RStepGrads vjp_r_step(const Matrix& gamma, const Matrix& mu, const Matrix& upstream_xtilde);

/// Fault injection for exercising the gradient-check harness.
struct BackwardHooks {
  /// Multiplies the skip-path gradient (1-eta)·upstream of every N-step.
  double nstep_skip_sign = 1.0;
};

HemGradients hem_backward(const HemTrace& trace, const Matrix& x, const HemConfig& cfg,
                          const Matrix& upstream_xtilde, GradMode mode,
                          const BackwardHooks& hooks = {});

using ScalarFn = std::function<double(const Matrix&)>;

inline constexpr double kDefaultFiniteDiffEps = 1e-5;

/// Central differences of `loss` at `point`, one coordinate at a time.
Matrix finite_diff(const ScalarFn& loss, const Matrix& point, double eps = kDefaultFiniteDiffEps);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_relative_error(const Matrix& analytic, const Matrix& numeric, double floor = 1e-8);

}  // namespace hem::backprop
