#include "hem/stack.hpp"

#include <cmath>
#include <random>
#include <string>

#include "hem/numerics.hpp"

namespace hem {

const char* to_string(BasisNorm norm) { return norm == BasisNorm::L2Rows ? "l2_rows" : "none"; }

BasisNorm basis_norm_from_string(const std::string& name) {
  if (name == "l2_rows" || name == "L2_ROWS") return BasisNorm::L2Rows;
  if (name == "none" || name == "NONE") return BasisNorm::None;
  throw ConfigError("unknown basis normalization '" + name + "' (expected none or l2_rows)");
}

void HemConfig::validate() const {
  if (num_layers_train < 1) throw ConfigError("hem.num_layers_train must be >= 1");
  if (num_layers_eval < 1) throw ConfigError("hem.num_layers_eval must be >= 1");
  if (!(step_size > 0.0 && step_size <= 1.0)) {
    throw ConfigError("hem.step_size must lie in (0, 1], got " + std::to_string(step_size));
  }
  if (temperature && !(*temperature > 0.0 && std::isfinite(*temperature))) {
    throw ConfigError("hem.temperature must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("hem.momentum must lie in [0, 1)");
  }
}

double HemConfig::resolve_temperature(std::size_t channels) const {
  return temperature ? *temperature : std::sqrt(static_cast<double>(channels));
}

void normalize_rows_l2(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    double s = 0.0;
    for (double v : row) s += v * v;
    if (s <= 0.0) continue;
    const double inv = 1.0 / std::sqrt(s);
    for (double& v : row) v *= inv;
  }
}

BasisState init_bases(std::size_t k, std::size_t c, std::uint64_t seed, BasisNorm normalize) {
  if (k < 1 || c < 1) throw ConfigError("init_bases requires k >= 1 and c >= 1");
  std::mt19937_64 rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(k + c));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix mu(k, c);
  for (double& v : mu.values()) v = dist(rng);
  if (normalize == BasisNorm::L2Rows) normalize_rows_l2(mu);
  return BasisState{std::move(mu)};
}

HemTrace hem_forward(const Matrix& x, const BasisState& state, const HemConfig& cfg,
                     std::optional<std::size_t> t_override) {
  cfg.validate();
  require_shape(x.cols() == state.running_mu.cols(), "hem_forward: x.cols != bases.cols");
  if (x.rows() == 0) throw ShapeError("hem_forward: empty input");
  const std::size_t layers = t_override.value_or(cfg.num_layers_train);
  if (layers < 1) throw ConfigError("hem_forward: layer count must be >= 1");

  HemTrace trace;
  trace.temperature = cfg.resolve_temperature(x.cols());
  trace.step_size = cfg.step_size;
  trace.kernel = cfg.kernel;
  trace.mu.reserve(layers + 1);
  trace.gamma.reserve(layers);
  trace.mu_em.reserve(layers);
  trace.elbo.reserve(layers);
  trace.mu.push_back(state.running_mu);

  std::vector<std::size_t> dead;
  for (std::size_t t = 1; t <= layers; ++t) {
    const gmm::GmmParams prev(trace.mu.back(), trace.temperature);
    Matrix gamma = gmm::e_step(x, prev, cfg.kernel);
    Matrix mu_em = gmm::m_step_partial(gamma, x, dead);
    if (!dead.empty()) {
      std::seed_seq seq{cfg.reinit_seed, static_cast<std::uint64_t>(t)};
      std::mt19937_64 rng(seq);
      std::uniform_int_distribution<std::size_t> pick(0, x.rows() - 1);
      std::normal_distribution<double> noise(0.0, 1.0);
      for (std::size_t k : dead) {
        const std::size_t n = pick(rng);
        for (std::size_t c = 0; c < x.cols(); ++c) mu_em(k, c) = x(n, c) + 1e-4 * noise(rng);
        trace.reinit_events.push_back({t, k, n});
      }
    }
    Matrix mu_next = gmm::n_step(trace.mu.back(), mu_em, cfg.step_size);
    trace.elbo.push_back(gmm::elbo(x, gmm::GmmParams(mu_next, trace.temperature), gamma));
    trace.gamma.push_back(std::move(gamma));
    trace.mu_em.push_back(std::move(mu_em));
    trace.mu.push_back(std::move(mu_next));
  }
  trace.reconstruction = gmm::r_step(trace.gamma.back(), trace.mu.back());
  return trace;
}

BasisState moving_average_update(const BasisState& state, const Matrix& mu_final_batch,
                                 double momentum, BasisNorm normalize) {
  require_shape(state.running_mu.same_shape(mu_final_batch),
                "moving_average_update: shapes differ");
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("momentum outside [0, 1]");
  Matrix mu = numerics::axpby(momentum, state.running_mu, 1.0 - momentum, mu_final_batch);
  if (normalize == BasisNorm::L2Rows) normalize_rows_l2(mu);
  return BasisState{std::move(mu)};
}

std::vector<HemTrace> eval_extrapolate(const Matrix& x, const BasisState& state,
                                       const HemConfig& cfg,
                                       std::span<const std::size_t> t_values) {
  if (t_values.empty()) throw ConfigError("eval_extrapolate: no evaluation depths given");
  std::vector<HemTrace> traces;
  traces.reserve(t_values.size());
  for (std::size_t t : t_values) traces.push_back(hem_forward(x, state, cfg, t));
  return traces;
}

}  // namespace hem
