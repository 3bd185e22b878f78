#include "hem/backprop.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hem/numerics.hpp"

namespace hem::backprop {

namespace nx = hem::numerics;

const char* to_string(GradMode mode) { return mode == GradMode::Exact ? "exact" : "skip_only"; }

EStepGrads vjp_e_step(const Matrix& x, const Matrix& mu, double sigma2, gmm::Kernel kernel,
                      const Matrix& gamma, const Matrix& upstream_gamma) {
  require_shape(x.cols() == mu.cols(), "vjp_e_step: x.cols != mu.cols");
  require_shape(gamma.rows() == x.rows() && gamma.cols() == mu.rows(),
                "vjp_e_step: gamma must be N×K");
  require_shape(upstream_gamma.same_shape(gamma), "vjp_e_step: upstream shape");

  // Softmax VJP, row by row: g_L = (g_gamma - <g_gamma, gamma>)⊙gamma.
  Matrix grad_logits(gamma.rows(), gamma.cols());
  for (std::size_t n = 0; n < gamma.rows(); ++n) {
    const auto g = upstream_gamma.row(n);
    const auto p = gamma.row(n);
    double dot = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) dot += g[k] * p[k];
    auto dst = grad_logits.row(n);
    for (std::size_t k = 0; k < p.size(); ++k) dst[k] = (g[k] - dot) * p[k];
  }

  const double inv = 1.0 / sigma2;
  EStepGrads out;
  if (kernel == gmm::Kernel::Dot) {
    // L = x·muᵀ/σ²
    out.grad_x = nx::scaled(nx::matmul(grad_logits, mu), inv);
    out.grad_mu = nx::scaled(nx::matmul_tn(grad_logits, x), inv);
    return out;
  }

  // L_nk = -||x_n - mu_k||²/(2σ²):  dL/dx_n = -(x_n - mu_k)/σ²,  dL/dmu_k = (x_n - mu_k)/σ².
  const auto row_mass = nx::row_sums(grad_logits);
  const auto col_mass = nx::column_sums(grad_logits);
  out.grad_x = nx::matmul(grad_logits, mu);
  for (std::size_t n = 0; n < x.rows(); ++n) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      out.grad_x(n, c) = (out.grad_x(n, c) - row_mass[n] * x(n, c)) * inv;
    }
  }
  out.grad_mu = nx::matmul_tn(grad_logits, x);
  for (std::size_t k = 0; k < mu.rows(); ++k) {
    for (std::size_t c = 0; c < mu.cols(); ++c) {
      out.grad_mu(k, c) = (out.grad_mu(k, c) - col_mass[k] * mu(k, c)) * inv;
    }
  }
  return out;
}

MStepGrads vjp_m_step(const Matrix& gamma, const Matrix& x, const Matrix& mu_em,
                      const Matrix& upstream_mu_em, const std::vector<std::size_t>& frozen) {
  require_shape(gamma.rows() == x.rows(), "vjp_m_step: gamma.rows != x.rows");
  require_shape(mu_em.rows() == gamma.cols() && mu_em.cols() == x.cols(),
                "vjp_m_step: mu_em must be K×C");
  require_shape(upstream_mu_em.same_shape(mu_em), "vjp_m_step: upstream shape");

  const auto mass = nx::column_sums(gamma);
  // Upstream divided by N_k; frozen rows carry nothing.
  Matrix scaled_up = upstream_mu_em;
  for (std::size_t k = 0; k < scaled_up.rows(); ++k) {
    const bool is_frozen = std::find(frozen.begin(), frozen.end(), k) != frozen.end();
    auto row = scaled_up.row(k);
    for (double& v : row) v = is_frozen ? 0.0 : v / mass[k];
  }

  MStepGrads out;
  // mu_k = sum_n gamma_nk x_n / N_k
  //   d/dx_n     : gamma_nk / N_k
  //   d/dgamma_nk: (x_n - mu_k) / N_k
  out.grad_x = nx::matmul(gamma, scaled_up);
  out.grad_gamma = nx::matmul_nt(x, scaled_up);
  std::vector<double> offset(mu_em.rows(), 0.0);
  for (std::size_t k = 0; k < mu_em.rows(); ++k) {
    const auto up = scaled_up.row(k);
    const auto m = mu_em.row(k);
    for (std::size_t c = 0; c < m.size(); ++c) offset[k] += up[c] * m[c];
  }
  for (std::size_t n = 0; n < out.grad_gamma.rows(); ++n) {
    auto row = out.grad_gamma.row(n);
    for (std::size_t k = 0; k < row.size(); ++k) row[k] -= offset[k];
  }
  return out;
}

NStepGrads vjp_n_step(const Matrix& upstream_mu_new, double eta) {
  return NStepGrads{nx::scaled(upstream_mu_new, 1.0 - eta), nx::scaled(upstream_mu_new, eta)};
}

RStepGrads vjp_r_step(const Matrix& gamma, const Matrix& mu, const Matrix& upstream_xtilde) {
  require_shape(gamma.cols() == mu.rows(), "vjp_r_step: gamma.cols != mu.rows");
  require_shape(upstream_xtilde.rows() == gamma.rows() && upstream_xtilde.cols() == mu.cols(),
                "vjp_r_step: upstream must be N×C");
  return RStepGrads{nx::matmul_nt(upstream_xtilde, mu), nx::matmul_tn(gamma, upstream_xtilde)};
}

namespace {

void check_trace(const HemTrace& trace, const Matrix& x, const HemConfig& cfg,
                 const Matrix& upstream_xtilde) {
  const std::size_t layers = trace.layers();
  if (layers == 0 || trace.mu.size() != layers + 1 || trace.mu_em.size() != layers ||
      trace.elbo.size() != layers) {
    throw ConsistencyError("hem_backward: malformed trace");
  }
  if (trace.gamma.front().rows() != x.rows() || trace.mu.front().cols() != x.cols()) {
    throw ConsistencyError("hem_backward: trace was not produced from this input");
  }
  if (trace.step_size != cfg.step_size || trace.kernel != cfg.kernel ||
      trace.temperature != cfg.resolve_temperature(x.cols())) {
    throw ConsistencyError("hem_backward: trace was produced under a different config");
  }
  if (!upstream_xtilde.same_shape(trace.reconstruction)) {
    throw ConsistencyError("hem_backward: upstream gradient must match the reconstruction");
  }
}

}  // namespace

HemGradients hem_backward(const HemTrace& trace, const Matrix& x, const HemConfig& cfg,
                          const Matrix& upstream_xtilde, GradMode mode,
                          const BackwardHooks& hooks) {
  check_trace(trace, x, cfg, upstream_xtilde);
  const std::size_t layers = trace.layers();
  const double eta = trace.step_size;

  HemGradients out;
  out.per_layer_grad_mu.resize(layers);
  out.per_layer_grad_x_contrib.resize(layers);
  out.grad_x = Matrix(x.rows(), x.cols());

  auto r = vjp_r_step(trace.gamma.back(), trace.mu.back(), upstream_xtilde);
  Matrix grad_mu = std::move(r.grad_mu);

  std::vector<std::size_t> frozen;
  for (std::size_t t = layers; t >= 1; --t) {
    const Matrix& gamma = trace.gamma[t - 1];
    out.per_layer_grad_mu[t - 1] = grad_mu;

    auto n = vjp_n_step(grad_mu, eta);
    if (hooks.nstep_skip_sign != 1.0) n.grad_mu_old = nx::scaled(n.grad_mu_old, hooks.nstep_skip_sign);

    frozen.clear();
    for (const auto& ev : trace.reinit_events) {
      if (ev.layer == t) frozen.push_back(ev.component);
    }
    auto m = vjp_m_step(gamma, x, trace.mu_em[t - 1], n.grad_mu_em, frozen);

    Matrix contrib = std::move(m.grad_x);
    Matrix grad_mu_prev = std::move(n.grad_mu_old);
    if (mode == GradMode::Exact) {
      Matrix grad_gamma = std::move(m.grad_gamma);
      if (t == layers) nx::add_in_place(grad_gamma, r.grad_gamma);
      auto e = vjp_e_step(x, trace.mu[t - 1], trace.temperature, trace.kernel, gamma, grad_gamma);
      nx::add_in_place(contrib, e.grad_x);
      nx::add_in_place(grad_mu_prev, e.grad_mu);
    }
    nx::add_in_place(out.grad_x, contrib);
    out.per_layer_grad_x_contrib[t - 1] = std::move(contrib);
    grad_mu = std::move(grad_mu_prev);
  }
  out.grad_mu0 = std::move(grad_mu);
  return out;
}

Matrix finite_diff(const ScalarFn& loss, const Matrix& point, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff: eps must be positive");
  Matrix grad(point.rows(), point.cols());
  Matrix probe = point;
  auto values = probe.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double plus = loss(probe);
    values[i] = saved - eps;
    const double minus = loss(probe);
    values[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw OracleError("finite_diff: non-finite loss at coordinate " + std::to_string(i));
    }
    grad.values()[i] = (plus - minus) / (2.0 * eps);
  }
  return grad;
}

double max_relative_error(const Matrix& analytic, const Matrix& numeric, double floor) {
  require_shape(analytic.same_shape(numeric), "max_relative_error");
  double worst = 0.0;
  const auto a = analytic.values();
  const auto b = numeric.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace hem::backprop
