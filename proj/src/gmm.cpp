#include "hem/gmm.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "hem/numerics.hpp"

namespace hem::gmm {

namespace nx = hem::numerics;

const char* to_string(Kernel kernel) { return kernel == Kernel::Rbf ? "rbf" : "dot"; }

Kernel kernel_from_string(const std::string& name) {
  if (name == "rbf" || name == "RBF") return Kernel::Rbf;
  if (name == "dot" || name == "DOT") return Kernel::Dot;
  throw ConfigError("unknown kernel '" + name + "' (expected rbf or dot)");
}

GmmParams::GmmParams(Matrix bases_in, double temperature_in)
    : bases(std::move(bases_in)), temperature(temperature_in) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be positive and finite");
  }
  if (!bases.all_finite()) throw ConfigError("bases contain non-finite values");
}

Matrix e_step_logits(const Matrix& x, const GmmParams& params, Kernel kernel) {
  require_shape(x.cols() == params.bases.cols(), "e_step: x.cols != bases.cols");
  if (kernel == Kernel::Dot) {
    return nx::scaled(nx::matmul_nt(x, params.bases), 1.0 / params.temperature);
  }
  return nx::scaled(nx::squared_distances(x, params.bases), -0.5 / params.temperature);
}

Matrix e_step(const Matrix& x, const GmmParams& params, Kernel kernel) {
  return nx::softmax_rows(e_step_logits(x, params, kernel));
}

Matrix m_step_partial(const Matrix& gamma, const Matrix& x, std::vector<std::size_t>& dead) {
  require_shape(gamma.rows() == x.rows(), "m_step: gamma.rows != x.rows");
  dead.clear();
  const auto mass = nx::column_sums(gamma);
  Matrix mu = nx::matmul_tn(gamma, x);
  for (std::size_t k = 0; k < mu.rows(); ++k) {
    auto row = mu.row(k);
    if (mass[k] < kMinComponentMass) {
      dead.push_back(k);
      std::fill(row.begin(), row.end(), 0.0);
      continue;
    }
    for (double& v : row) v /= mass[k];
  }
  return mu;
}

Matrix m_step(const Matrix& gamma, const Matrix& x) {
  std::vector<std::size_t> dead;
  Matrix mu = m_step_partial(gamma, x, dead);
  if (!dead.empty()) {
    const auto mass = nx::column_sums(gamma);
    throw DegenerateComponentError(dead.front(), mass[dead.front()]);
  }
  return mu;
}

Matrix n_step(const Matrix& mu_old, const Matrix& mu_em, double eta) {
  require_shape(mu_old.same_shape(mu_em), "n_step: mu_old and mu_em differ");
  if (!(eta >= 0.0 && eta <= 1.0)) {
    throw ConfigError("step size eta=" + std::to_string(eta) + " outside [0, 1]");
  }
  if (eta == 1.0) return mu_em;
  if (eta == 0.0) return mu_old;
  return nx::axpby(1.0 - eta, mu_old, eta, mu_em);
}

Matrix r_step(const Matrix& gamma, const Matrix& mu) {
  require_shape(gamma.cols() == mu.rows(), "r_step: gamma.cols != mu.rows");
  return nx::matmul(gamma, mu);
}

namespace {

// ln N(x | mu, σ²I) for every (n, k).
Matrix log_gaussian(const Matrix& x, const GmmParams& params) {
  require_shape(x.cols() == params.bases.cols(), "x.cols != bases.cols");
  const double sigma2 = params.temperature;
  const double c = static_cast<double>(x.cols());
  const double log_norm = -0.5 * c * std::log(2.0 * std::numbers::pi * sigma2);
  Matrix out = nx::squared_distances(x, params.bases);
  for (double& v : out.values()) v = log_norm - v / (2.0 * sigma2);
  return out;
}

}  // namespace

ElboValue elbo(const Matrix& x, const GmmParams& params, const Matrix& gamma) {
  require_shape(gamma.rows() == x.rows() && gamma.cols() == params.bases.rows(),
                "elbo: gamma must be N×K");
  const Matrix log_n = log_gaussian(x, params);
  ElboValue out;
  for (std::size_t n = 0; n < gamma.rows(); ++n) {
    for (std::size_t k = 0; k < gamma.cols(); ++k) {
      const double g = gamma(n, k);
      out.expected_complete_ll += g * log_n(n, k);
      // 0·ln 0 := 0
      if (g > 1e-300) out.entropy -= g * std::log(g);
    }
  }
  out.total = out.expected_complete_ll + out.entropy;
  return out;
}

double log_likelihood(const Matrix& x, const GmmParams& params) {
  const auto per_point = nx::logsumexp_rows(log_gaussian(x, params));
  double total = 0.0;
  for (double v : per_point) total += v;
  return total;
}

void check_row_stochastic(const Matrix& gamma, double tol) {
  for (std::size_t n = 0; n < gamma.rows(); ++n) {
    double s = 0.0;
    for (double v : gamma.row(n)) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConsistencyError("responsibility outside [0,1]");
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      throw ConsistencyError("responsibility row " + std::to_string(n) + " sums to " +
                             std::to_string(s));
    }
  }
}

}  // namespace hem::gmm
