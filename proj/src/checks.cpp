#include "hem/checks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "hem/errors.hpp"
#include "hem/numerics.hpp"
#include "hem/toy_model.hpp"

namespace hem::checks {

namespace nx = hem::numerics;
using backprop::GradMode;

namespace {

constexpr double kEtaGrid[] = {0.1, 0.25, 0.5, 0.75, 1.0};
constexpr double kGradEtas[] = {0.3, 1.0};
constexpr int kMaxRedraws = 100;

std::size_t uniform_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Matrix normal_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.values()) v = nd(rng);
  return m;
}

gmm::Kernel kernel_for(std::size_t i) { return i % 2 == 0 ? gmm::Kernel::Rbf : gmm::Kernel::Dot; }

double inf_norm(const Matrix& m) { return nx::max_abs(m); }

std::string describe(const Instance& in, std::size_t index) {
  std::ostringstream os;
  os << "instance " << index << " (N=" << in.x.rows() << " K=" << in.state.running_mu.rows()
     << " C=" << in.x.cols() << " T=" << in.cfg.num_layers_train
     << " eta=" << in.cfg.step_size << " kernel=" << gmm::to_string(in.cfg.kernel) << ")";
  return os.str();
}

void record(CheckResult& r, double err, const std::string& where) {
  if (!(err <= r.worst)) {
    r.worst = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
    r.detail = where;
  }
}

CheckResult finish(CheckResult r) {
  r.passed = r.worst <= r.tolerance;
  return r;
}

backprop::BackwardHooks hooks_for(const GradcheckConfig& cfg) {
  backprop::BackwardHooks h;
  if (cfg.flip_nstep_skip) h.nstep_skip_sign = -1.0;
  return h;
}

}  // namespace

Instance random_instance(std::mt19937_64& rng, const InstanceLimits& limits, gmm::Kernel kernel,
                         double eta) {
  if (limits.min_n < 1 || limits.max_n < limits.min_n || limits.max_k < 1 || limits.max_c < 1 ||
      limits.min_t < 1 || limits.max_t < limits.min_t) {
    throw ConfigError("random_instance: invalid limits");
  }
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    const std::size_t n = uniform_size(rng, limits.min_n, limits.max_n);
    const std::size_t k = uniform_size(rng, 1, std::min(limits.max_k, n));
    const std::size_t c = uniform_size(rng, 1, limits.max_c);
    const std::size_t t = uniform_size(rng, limits.min_t, limits.max_t);

    Instance in;
    const Matrix centers = normal_matrix(rng, k, c, 2.0);
    in.x = normal_matrix(rng, n, c, 0.6);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) in.x(i, j) += centers(i % k, j);
    }
    Matrix mu = normal_matrix(rng, k, c, 0.5);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t src = uniform_size(rng, 0, n - 1);
      for (std::size_t col = 0; col < c; ++col) mu(j, col) += in.x(src, col);
    }
    in.state.running_mu = std::move(mu);
    in.cfg.num_layers_train = t;
    in.cfg.num_layers_eval = t;
    in.cfg.step_size = eta;
    in.cfg.kernel = kernel;
    in.cfg.temperature = std::uniform_real_distribution<double>(0.5, 2.0)(rng) *
                         (kernel == gmm::Kernel::Dot ? 2.0 : 1.0);
    in.cfg.normalize_bases = BasisNorm::None;
    in.cfg.reinit_seed = rng();
    in.upstream = normal_matrix(rng, n, c, 1.0);

    if (hem_forward(in.x, in.state, in.cfg).reinit_events.empty()) return in;
  }
  throw ConsistencyError("random_instance: could not draw an instance without dead bases");
}

double normwise_relative_error(const std::vector<Matrix>& analytic,
                               const std::vector<Matrix>& numeric, double floor) {
  if (analytic.size() != numeric.size()) throw ShapeError("normwise_relative_error: count");
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    require_shape(analytic[i].same_shape(numeric[i]), "normwise_relative_error: shapes differ");
    const auto a = analytic[i].values();
    const auto b = numeric[i].values();
    for (std::size_t j = 0; j < a.size(); ++j) {
      diff += (a[j] - b[j]) * (a[j] - b[j]);
      na += a[j] * a[j];
      nn += b[j] * b[j];
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

void GradcheckConfig::validate() const {
  if (!(tolerance > 0.0) || !(skip_tolerance > 0.0) || !(structure_tolerance > 0.0) ||
      !(elbo_slack >= 0.0)) {
    throw ConfigError("gradcheck: tolerances must be positive");
  }
  if (hem_instances + model_instances + skip_instances + elbo_instances == 0) {
    throw ConfigError("gradcheck: no instances requested");
  }
}

CheckResult check_hem_gradients(const GradcheckConfig& cfg) {
  CheckResult r{"stack gradient vs finite differences", false, cfg.hem_instances, 0.0,
                cfg.tolerance, ""};
  std::mt19937_64 rng(cfg.seed ^ 0x51a7e0001ULL);
  const auto hooks = hooks_for(cfg);
  for (std::size_t i = 0; i < cfg.hem_instances; ++i) {
    const double eta = kGradEtas[(i / 2) % 2];
    const Instance in = random_instance(rng, {}, kernel_for(i), eta);
    const HemTrace trace = hem_forward(in.x, in.state, in.cfg);
    const auto g = backprop::hem_backward(trace, in.x, in.cfg, in.upstream, GradMode::Exact, hooks);

    auto inner = [&](const Matrix& x, const Matrix& mu0) {
      const HemTrace t = hem_forward(x, BasisState{mu0}, in.cfg);
      double s = 0.0;
      const auto a = in.upstream.values();
      const auto b = t.reconstruction.values();
      for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
      return s;
    };
    const Matrix fd_x =
        backprop::finite_diff([&](const Matrix& x) { return inner(x, in.state.running_mu); }, in.x);
    const Matrix fd_mu = backprop::finite_diff(
        [&](const Matrix& mu) { return inner(in.x, mu); }, in.state.running_mu);
    record(r, normwise_relative_error({g.grad_x, g.grad_mu0}, {fd_x, fd_mu}), describe(in, i));
  }
  return finish(r);
}

CheckResult check_model_gradients(const GradcheckConfig& cfg) {
  CheckResult r{"model gradient vs finite differences", false, cfg.model_instances, 0.0,
                cfg.tolerance, ""};
  std::mt19937_64 rng(cfg.seed ^ 0x51a7e0002ULL);
  for (std::size_t i = 0; i < cfg.model_instances; ++i) {
    const gmm::Kernel kernel = kernel_for(i);
    const double eta = kGradEtas[(i / 2) % 2];
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxRedraws) throw ConsistencyError("model check: no stable instance");
      model::ModelConfig mc;
      const std::size_t n = uniform_size(rng, 2, 8);
      const std::size_t d = uniform_size(rng, 1, 4);
      const std::size_t classes = uniform_size(rng, 2, 3);
      mc.hidden = uniform_size(rng, 0, 3);
      mc.channels = uniform_size(rng, 1, 4);
      mc.num_bases = uniform_size(rng, 1, 3);
      mc.use_hem = i % 4 != 3;
      HemConfig hc;
      hc.num_layers_train = uniform_size(rng, 1, 3);
      hc.step_size = eta;
      hc.kernel = kernel;
      hc.temperature = 1.0;
      hc.normalize_bases = BasisNorm::None;

      const Matrix raw = normal_matrix(rng, n, d, 1.0);
      data::Labels labels(n);
      for (auto& l : labels) l = static_cast<std::uint32_t>(uniform_size(rng, 0, classes - 1));
      model::ToyModelParams params = model::init_params(d, classes, mc, rng());
      for (Matrix* b : {&params.hidden_bias, &params.backbone_bias, &params.head_bias}) {
        if (b->size() > 0) *b = normal_matrix(rng, 1, b->cols(), 0.3);
      }
      const BasisState state{normal_matrix(rng, mc.num_bases, mc.channels, 1.0)};

      const auto fwd = model::model_forward(raw, params, state, hc, mc);
      if (fwd.trace && !fwd.trace->reinit_events.empty()) continue;
      const auto ce = model::cross_entropy(fwd.logits, labels);
      const auto grads = model::model_backward(raw, params, fwd, ce.grad_logits, hc, mc);

      std::vector<Matrix> analytic, numeric;
      auto probe = [&](Matrix model::ToyModelParams::*field) {
        if ((params.*field).size() == 0) return;
        analytic.push_back(grads.params.*field);
        numeric.push_back(backprop::finite_diff(
            [&](const Matrix& v) {
              model::ToyModelParams p = params;
              p.*field = v;
              return model::cross_entropy(model::model_forward(raw, p, state, hc, mc).logits,
                                          labels)
                  .loss;
            },
            params.*field));
      };
      probe(&model::ToyModelParams::hidden_weight);
      probe(&model::ToyModelParams::hidden_bias);
      probe(&model::ToyModelParams::backbone_weight);
      probe(&model::ToyModelParams::backbone_bias);
      probe(&model::ToyModelParams::head_weight);
      probe(&model::ToyModelParams::head_bias);

      std::ostringstream where;
      where << "model instance " << i << " (N=" << n << " D=" << d << " H=" << mc.hidden
            << " C=" << mc.channels << " K=" << mc.num_bases << " hem=" << mc.use_hem << ")";
      record(r, normwise_relative_error(analytic, numeric), where.str());
      break;
    }
  }
  return finish(r);
}

CheckResult check_skip_law(const GradcheckConfig& cfg) {
  CheckResult r{"skip-connection gradient law", false, cfg.skip_instances, 0.0,
                cfg.skip_tolerance, ""};
  std::mt19937_64 rng(cfg.seed ^ 0x51a7e0003ULL);
  const auto hooks = hooks_for(cfg);
  for (std::size_t i = 0; i < cfg.skip_instances; ++i) {
    const double eta = kEtaGrid[i % std::size(kEtaGrid)];
    const Instance in = random_instance(rng, {2, 16, 4, 5, 1, 6}, kernel_for(i / 5), eta);
    const HemTrace trace = hem_forward(in.x, in.state, in.cfg);
    const auto g =
        backprop::hem_backward(trace, in.x, in.cfg, in.upstream, GradMode::SkipOnly, hooks);
    const std::size_t layers = trace.layers();
    const Matrix& top = g.per_layer_grad_mu[layers - 1];
    const double scale = std::max(1.0, inf_norm(top));
    for (std::size_t t = 1; t <= layers; ++t) {
      const Matrix& got = g.per_layer_grad_mu[t - 1];
      double err = 0.0;
      if (eta == 1.0 && t < layers) {
        // Must be exactly zero, not merely small.
        err = inf_norm(got) == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
      } else {
        const double w = std::pow(1.0 - eta, static_cast<double>(layers - t));
        err = inf_norm(nx::subtract(got, nx::scaled(top, w))) / scale;
      }
      record(r, err, describe(in, i) + " layer " + std::to_string(t));
    }
  }
  return finish(r);
}

CheckResult check_skip_structure(const GradcheckConfig& cfg) {
  CheckResult r{"skip-only input-gradient structure", false, cfg.skip_instances, 0.0,
                cfg.structure_tolerance, ""};
  std::mt19937_64 rng(cfg.seed ^ 0x51a7e0004ULL);
  const auto hooks = hooks_for(cfg);
  for (std::size_t i = 0; i < cfg.skip_instances; ++i) {
    const double eta = kEtaGrid[i % std::size(kEtaGrid)];
    const Instance in = random_instance(rng, {2, 16, 4, 5, 1, 6}, kernel_for(i / 5), eta);
    const HemTrace trace = hem_forward(in.x, in.state, in.cfg);
    const auto g =
        backprop::hem_backward(trace, in.x, in.cfg, in.upstream, GradMode::SkipOnly, hooks);
    const std::size_t layers = trace.layers();
    // Top-layer basis gradient straight from the R-step: dE/dmu^(T) = gamma^(T)^T W.
    const Matrix& gamma_top = trace.gamma[layers - 1];
    Matrix top(gamma_top.cols(), in.x.cols(), 0.0);
    for (std::size_t n = 0; n < gamma_top.rows(); ++n) {
      for (std::size_t k = 0; k < gamma_top.cols(); ++k) {
        for (std::size_t c = 0; c < in.x.cols(); ++c) {
          top(k, c) += gamma_top(n, k) * in.upstream(n, c);
        }
      }
    }
    for (std::size_t t = 1; t <= layers; ++t) {
      const Matrix& gamma = trace.gamma[t - 1];
      const double w = std::pow(1.0 - eta, static_cast<double>(layers - t));
      Matrix expected(in.x.rows(), in.x.cols(), 0.0);
      for (std::size_t k = 0; k < gamma.cols(); ++k) {
        double mass = 0.0;
        for (std::size_t n = 0; n < gamma.rows(); ++n) mass += gamma(n, k);
        for (std::size_t n = 0; n < gamma.rows(); ++n) {
          const double coef = w * eta * gamma(n, k) / mass;
          for (std::size_t c = 0; c < in.x.cols(); ++c) expected(n, c) += coef * top(k, c);
        }
      }
      const double scale = std::max(1.0, inf_norm(expected));
      const double err = inf_norm(nx::subtract(g.per_layer_grad_x_contrib[t - 1], expected)) / scale;
      record(r, err, describe(in, i) + " layer " + std::to_string(t));
    }
  }
  return finish(r);
}

CheckResult check_elbo_ascent(const GradcheckConfig& cfg) {
  CheckResult r{"per-layer ELBO ascent", false, cfg.elbo_instances, 0.0, cfg.elbo_slack, ""};
  std::mt19937_64 rng(cfg.seed ^ 0x51a7e0005ULL);
  for (std::size_t i = 0; i < cfg.elbo_instances; ++i) {
    const double eta = kEtaGrid[i % std::size(kEtaGrid)];
    const Instance in = random_instance(rng, {8, 256, 8, 16, 2, 12}, gmm::Kernel::Rbf, eta);
    const HemTrace trace = hem_forward(in.x, in.state, in.cfg);
    const std::size_t layers = trace.layers();
    for (std::size_t t = 1; t <= layers; ++t) {
      const std::string where = describe(in, i) + " layer " + std::to_string(t);
      // The N-step alone must not lower the ELBO under fixed responsibilities.
      const double before =
          gmm::elbo(in.x, gmm::GmmParams(trace.mu[t - 1], trace.temperature), trace.gamma[t - 1]).total;
      record(r, before - trace.elbo[t - 1].total, where + " (N-step)");
      if (t == layers) continue;
      const double drop = trace.elbo[t - 1].total - trace.elbo[t].total;
      record(r, drop, where);
      if (inf_norm(nx::subtract(trace.mu[t + 1], trace.mu[t])) >= 1e-8 && !(drop < 0.0)) {
        record(r, std::numeric_limits<double>::infinity(), where + " (no strict increase)");
      }
    }
  }
  return finish(r);
}

std::vector<CheckResult> run_all(const GradcheckConfig& cfg) {
  cfg.validate();
  std::vector<CheckResult> out;
  if (cfg.hem_instances > 0) out.push_back(check_hem_gradients(cfg));
  if (cfg.model_instances > 0) out.push_back(check_model_gradients(cfg));
  if (cfg.skip_instances > 0) {
    out.push_back(check_skip_law(cfg));
    out.push_back(check_skip_structure(cfg));
  }
  if (cfg.elbo_instances > 0) out.push_back(check_elbo_ascent(cfg));
  return out;
}

}  // namespace hem::checks
