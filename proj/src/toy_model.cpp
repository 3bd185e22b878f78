#include "hem/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>
#include <tuple>

#include "hem/numerics.hpp"

namespace hem::model {

namespace nx = hem::numerics;

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{seed, tag};
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

enum SeedTag : std::uint64_t { kParamsTag = 1, kBasesTag = 2, kShuffleTag = 3, kProbeTag = 4 };

Matrix glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix w(fan_in, fan_out);
  for (double& v : w.values()) v = dist(rng);
  return w;
}

// a·W + 1·bᵀ
Matrix affine(const Matrix& a, const Matrix& w, const Matrix& bias) {
  Matrix out = nx::matmul(a, w);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias(0, j);
  }
  return out;
}

Matrix column_sum_row(const Matrix& a) {
  const auto sums = nx::column_sums(a);
  return Matrix(1, sums.size(), sums);
}

template <typename F>
void for_each_param(ToyModelParams& p, F&& f) {
  f(p.hidden_weight);
  f(p.hidden_bias);
  f(p.backbone_weight);
  f(p.backbone_bias);
  f(p.head_weight);
  f(p.head_bias);
}

template <typename F>
void for_each_param_pair(ToyModelParams& a, const ToyModelParams& b, F&& f) {
  f(a.hidden_weight, b.hidden_weight);
  f(a.hidden_bias, b.hidden_bias);
  f(a.backbone_weight, b.backbone_weight);
  f(a.backbone_bias, b.backbone_bias);
  f(a.head_weight, b.head_weight);
  f(a.head_bias, b.head_bias);
}

std::size_t count_correct(const Matrix& logits, const data::Labels& labels) {
  std::size_t correct = 0;
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    const auto row = logits.row(n);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels[n]) ++correct;
  }
  return correct;
}

void check_dataset(const data::Dataset& dataset, const ToyModelParams& params) {
  if (dataset.samples.empty()) throw DataError("dataset is empty");
  const std::size_t input_dim =
      params.hidden_weight.empty() ? params.backbone_weight.rows() : params.hidden_weight.rows();
  for (const auto& s : dataset.samples) {
    if (s.raw_features.cols() != input_dim) throw DataError("dataset feature dimension mismatch");
    if (s.labels.size() != s.raw_features.rows()) throw DataError("label count != rows");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (channels < 1) throw ConfigError("model.channels must be >= 1");
  if (num_bases < 1) throw ConfigError("model.num_bases must be >= 1");
}

bool ToyModelParams::all_finite() const {
  return hidden_weight.all_finite() && hidden_bias.all_finite() && backbone_weight.all_finite() &&
         backbone_bias.all_finite() && head_weight.all_finite() && head_bias.all_finite();
}

ToyModelParams ToyModelParams::zeros_like() const {
  ToyModelParams z = *this;
  for_each_param(z, [](Matrix& m) { m = Matrix(m.rows(), m.cols()); });
  return z;
}

void ToyModelParams::add_scaled(const ToyModelParams& other, double scale) {
  for_each_param_pair(*this, other, [scale](Matrix& a, const Matrix& b) {
    require_shape(a.same_shape(b), "ToyModelParams::add_scaled");
    auto dst = a.values();
    auto src = b.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  });
}

ToyModelParams init_params(std::size_t input_dim, std::size_t num_classes,
                           const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (input_dim < 1 || num_classes < 2) throw ConfigError("model needs input_dim >= 1 and >= 2 classes");
  std::mt19937_64 rng(derive_seed(seed, kParamsTag));
  ToyModelParams p;
  std::size_t backbone_in = input_dim;
  if (cfg.hidden > 0) {
    p.hidden_weight = glorot(input_dim, cfg.hidden, rng);
    p.hidden_bias = Matrix(1, cfg.hidden);
    backbone_in = cfg.hidden;
  }
  p.backbone_weight = glorot(backbone_in, cfg.channels, rng);
  p.backbone_bias = Matrix(1, cfg.channels);
  p.head_weight = glorot(cfg.channels, num_classes, rng);
  p.head_bias = Matrix(1, num_classes);
  return p;
}

ForwardResult model_forward(const Matrix& raw, const ToyModelParams& params,
                            const BasisState& state, const HemConfig& hem_cfg,
                            const ModelConfig& cfg, std::optional<std::size_t> t_override) {
  ForwardResult out;
  const Matrix* backbone_in = &raw;
  if (!params.hidden_weight.empty()) {
    require_shape(raw.cols() == params.hidden_weight.rows(), "model_forward: raw dim");
    out.hidden = affine(raw, params.hidden_weight, params.hidden_bias);
    for (double& v : out.hidden.values()) v = std::tanh(v);
    backbone_in = &out.hidden;
  }
  require_shape(backbone_in->cols() == params.backbone_weight.rows(), "model_forward: raw dim");
  out.features = affine(*backbone_in, params.backbone_weight, params.backbone_bias);
  if (cfg.use_hem) {
    out.trace = hem_forward(out.features, state, hem_cfg, t_override);
    out.logits = affine(out.trace->reconstruction, params.head_weight, params.head_bias);
  } else {
    out.logits = affine(out.features, params.head_weight, params.head_bias);
  }
  return out;
}

LossResult cross_entropy(const Matrix& logits, const data::Labels& labels) {
  require_shape(labels.size() == logits.rows(), "cross_entropy: one label per row");
  for (auto l : labels) {
    if (l >= logits.cols()) throw DataError("label " + std::to_string(l) + " out of range");
  }
  const auto lse = nx::logsumexp_rows(logits);
  LossResult out{0.0, nx::softmax_rows(logits)};
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    out.loss += lse[n] - logits(n, labels[n]);
    out.grad_logits(n, labels[n]) -= 1.0;
  }
  out.loss *= inv_n;
  for (double& v : out.grad_logits.values()) v *= inv_n;
  return out;
}

ModelGradients model_backward(const Matrix& raw, const ToyModelParams& params,
                              const ForwardResult& fwd, const Matrix& grad_logits,
                              const HemConfig& hem_cfg, const ModelConfig& cfg,
                              backprop::GradMode mode) {
  if (cfg.use_hem != fwd.trace.has_value()) {
    throw ConsistencyError("model_backward: forward result does not match model config");
  }
  require_shape(grad_logits.same_shape(fwd.logits), "model_backward: grad_logits shape");
  ModelGradients g;
  g.params = params.zeros_like();

  const Matrix& head_in = cfg.use_hem ? fwd.trace->reconstruction : fwd.features;
  g.params.head_weight = nx::matmul_tn(head_in, grad_logits);
  g.params.head_bias = column_sum_row(grad_logits);
  Matrix grad_head_in = nx::matmul_nt(grad_logits, params.head_weight);

  if (cfg.use_hem) {
    g.hem = backprop::hem_backward(*fwd.trace, fwd.features, hem_cfg, grad_head_in, mode);
    g.grad_features = g.hem->grad_x;
  } else {
    g.grad_features = std::move(grad_head_in);
  }

  const Matrix& backbone_in = params.hidden_weight.empty() ? raw : fwd.hidden;
  g.params.backbone_weight = nx::matmul_tn(backbone_in, g.grad_features);
  g.params.backbone_bias = column_sum_row(g.grad_features);

  if (!params.hidden_weight.empty()) {
    Matrix grad_pre = nx::matmul_nt(g.grad_features, params.backbone_weight);
    for (std::size_t i = 0; i < grad_pre.size(); ++i) {
      const double h = fwd.hidden.values()[i];
      grad_pre.values()[i] *= 1.0 - h * h;
    }
    g.params.hidden_weight = nx::matmul_tn(raw, grad_pre);
    g.params.hidden_bias = column_sum_row(grad_pre);
  }
  return g;
}

ToyModelParams sgd_step(const ToyModelParams& params, const ToyModelParams& grads, double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!grads.all_finite()) throw TrainingError("non-finite gradient");
  ToyModelParams out = params;
  out.add_scaled(grads, -lr);
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (log_interval < 1) throw ConfigError("train.log_interval must be >= 1");
  if (model.use_hem && probe_size < 1) throw ConfigError("train.probe_size must be >= 1");
  hem.validate();
  model.validate();
}

std::vector<std::size_t> probe_indices(std::size_t dataset_size, std::size_t probe_size,
                                       std::uint64_t seed) {
  std::vector<std::size_t> idx(dataset_size);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, kProbeTag));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(probe_size, dataset_size));
  std::sort(idx.begin(), idx.end());
  return idx;
}

diag::LayerGradStats probe_grad_profile(const data::Dataset& dataset,
                                        const std::vector<std::size_t>& probe,
                                        const ToyModelParams& params, const BasisState& state,
                                        const HemConfig& hem_cfg, const ModelConfig& cfg,
                                        std::size_t step) {
  if (!cfg.use_hem) throw ConsistencyError("probe_grad_profile requires the HEM stack");
  std::vector<diag::LayerGradStats> per_sample(probe.size());
  std::vector<std::exception_ptr> errors(probe.size());
  const auto count = static_cast<std::int64_t>(probe.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < count; ++i) {
    try {
      const auto& s = dataset.samples.at(probe[static_cast<std::size_t>(i)]);
      const auto fwd = model_forward(s.raw_features, params, state, hem_cfg, cfg);
      const auto loss = cross_entropy(fwd.logits, s.labels);
      const Matrix upstream = nx::matmul_nt(loss.grad_logits, params.head_weight);
      const auto exact = backprop::hem_backward(*fwd.trace, fwd.features, hem_cfg, upstream,
                                                backprop::GradMode::Exact);
      const auto skip = backprop::hem_backward(*fwd.trace, fwd.features, hem_cfg, upstream,
                                               backprop::GradMode::SkipOnly);
      per_sample[static_cast<std::size_t>(i)] = diag::grad_profile(*fwd.trace, exact, skip, step);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return diag::average(per_sample);
}

namespace {

struct SampleResult {
  ToyModelParams grads;
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t rows = 0;
  std::vector<double> elbo;
  Matrix final_mu;
};

// Config and data were validated before the first step, so a library error
// raised mid-training means the parameters have left the numerically sane
// region (overflowing features, non-finite bases inside the stack).
[[noreturn]] void rethrow_as_training_error(const std::exception_ptr& e, std::size_t step) {
  try {
    std::rethrow_exception(e);
  } catch (const TrainingError&) {
    throw;
  } catch (const Error& err) {
    throw TrainingError(std::string(err.what()) + " at step " + std::to_string(step));
  }
}

SampleResult run_sample(const data::SegSample& s, const ToyModelParams& params,
                        const BasisState& state, const TrainConfig& cfg) {
  const auto fwd = model_forward(s.raw_features, params, state, cfg.hem, cfg.model);
  const auto loss = cross_entropy(fwd.logits, s.labels);
  auto g = model_backward(s.raw_features, params, fwd, loss.grad_logits, cfg.hem, cfg.model);
  SampleResult r;
  r.grads = std::move(g.params);
  r.loss = loss.loss;
  r.correct = count_correct(fwd.logits, s.labels);
  r.rows = s.labels.size();
  if (fwd.trace) {
    for (const auto& e : fwd.trace->elbo) r.elbo.push_back(e.total);
    r.final_mu = fwd.trace->final_mu();
  }
  return r;
}

}  // namespace

std::pair<ToyModelParams, BasisState> initial_model(std::size_t input_dim,
                                                    std::size_t num_classes,
                                                    const TrainConfig& cfg) {
  std::pair<ToyModelParams, BasisState> out;
  out.first = init_params(input_dim, num_classes, cfg.model, cfg.seed);
  if (cfg.model.use_hem) {
    out.second = init_bases(cfg.model.num_bases, cfg.model.channels,
                            derive_seed(cfg.seed, kBasesTag), cfg.hem.normalize_bases);
  }
  return out;
}

TrainResult train(const data::Dataset& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.samples.empty()) throw DataError("dataset is empty");
  TrainResult out;
  std::tie(out.params, out.state) =
      initial_model(dataset.feature_dim(), dataset.num_classes, cfg);
  check_dataset(dataset, out.params);
  const auto probe = probe_indices(dataset.samples.size(), cfg.probe_size, cfg.seed);

  std::vector<std::size_t> order(dataset.samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(cfg.seed, kShuffleTag));

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      if (cfg.model.use_hem && step % cfg.log_interval == 0) {
        try {
          out.history.grad_stats.push_back(probe_grad_profile(dataset, probe, out.params,
                                                              out.state, cfg.hem, cfg.model, step));
        } catch (...) {
          rethrow_as_training_error(std::current_exception(), step);
        }
      }

      const auto batch = static_cast<std::int64_t>(end - begin);
      std::vector<SampleResult> results(static_cast<std::size_t>(batch));
      std::vector<std::exception_ptr> errors(static_cast<std::size_t>(batch));
#pragma omp parallel for schedule(static)
      for (std::int64_t i = 0; i < batch; ++i) {
        try {
          const auto& s = dataset.samples[order[begin + static_cast<std::size_t>(i)]];
          results[static_cast<std::size_t>(i)] = run_sample(s, out.params, out.state, cfg);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
      for (const auto& e : errors) {
        if (e) rethrow_as_training_error(e, step);
      }

      // Fixed-order reduction keeps runs bitwise reproducible.
      const double w = 1.0 / static_cast<double>(batch);
      ToyModelParams grads = out.params.zeros_like();
      StepMetrics m;
      m.step = step;
      m.epoch = epoch;
      std::size_t correct = 0;
      std::size_t rows = 0;
      Matrix mu_mean;
      for (const auto& r : results) {
        grads.add_scaled(r.grads, w);
        m.loss += w * r.loss;
        correct += r.correct;
        rows += r.rows;
        if (m.elbo.empty()) m.elbo.assign(r.elbo.size(), 0.0);
        for (std::size_t t = 0; t < r.elbo.size(); ++t) m.elbo[t] += w * r.elbo[t];
        if (cfg.model.use_hem) {
          if (mu_mean.empty()) mu_mean = Matrix(r.final_mu.rows(), r.final_mu.cols());
          mu_mean = nx::axpby(1.0, mu_mean, w, r.final_mu);
        }
      }
      m.accuracy = static_cast<double>(correct) / static_cast<double>(rows);
      if (!std::isfinite(m.loss)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step));
      }
      try {
        out.params = sgd_step(out.params, grads, cfg.learning_rate);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step));
      }
      if (!out.params.all_finite()) {
        throw TrainingError("non-finite parameters after step " + std::to_string(step));
      }
      if (cfg.model.use_hem) {
        out.state = moving_average_update(out.state, mu_mean, cfg.hem.momentum,
                                          cfg.hem.normalize_bases);
        if (!out.state.running_mu.all_finite()) {
          throw TrainingError("non-finite bases after step " + std::to_string(step));
        }
      }
      out.history.steps.push_back(std::move(m));
      ++step;
    }
  }
  return out;
}

EvalResult evaluate(const data::Dataset& dataset, const ToyModelParams& params,
                    const BasisState& state, const HemConfig& hem_cfg, const ModelConfig& cfg,
                    std::optional<std::size_t> layers) {
  check_dataset(dataset, params);
  const std::size_t depth = layers.value_or(hem_cfg.num_layers_eval);
  const auto count = static_cast<std::int64_t>(dataset.samples.size());
  std::vector<EvalResult> per(dataset.samples.size());
  std::vector<std::size_t> correct(dataset.samples.size());
  std::vector<std::exception_ptr> errors(dataset.samples.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < count; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    try {
      const auto& s = dataset.samples[idx];
      const auto fwd = model_forward(s.raw_features, params, state, hem_cfg, cfg, depth);
      per[idx].loss = cross_entropy(fwd.logits, s.labels).loss;
      correct[idx] = count_correct(fwd.logits, s.labels);
      if (fwd.trace) per[idx].final_elbo = fwd.trace->elbo.back().total;
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  EvalResult out;
  std::size_t hits = 0;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < per.size(); ++i) {
    out.loss += per[i].loss / static_cast<double>(per.size());
    out.final_elbo += per[i].final_elbo;
    hits += correct[i];
    rows += dataset.samples[i].labels.size();
  }
  out.accuracy = static_cast<double>(hits) / static_cast<double>(rows);
  return out;
}

data::Container to_checkpoint(const ToyModelParams& params, const BasisState& state) {
  data::Container c;
  c.put("hidden_weight", params.hidden_weight);
  c.put("hidden_bias", params.hidden_bias);
  c.put("backbone_weight", params.backbone_weight);
  c.put("backbone_bias", params.backbone_bias);
  c.put("head_weight", params.head_weight);
  c.put("head_bias", params.head_bias);
  c.put("running_mu", state.running_mu);
  return c;
}

std::pair<ToyModelParams, BasisState> from_checkpoint(const data::Container& c) {
  ToyModelParams p;
  p.hidden_weight = c.matrix("hidden_weight");
  p.hidden_bias = c.matrix("hidden_bias");
  p.backbone_weight = c.matrix("backbone_weight");
  p.backbone_bias = c.matrix("backbone_bias");
  p.head_weight = c.matrix("head_weight");
  p.head_bias = c.matrix("head_bias");
  if (p.backbone_bias.cols() != p.backbone_weight.cols() ||
      p.head_weight.rows() != p.backbone_weight.cols() ||
      p.head_bias.cols() != p.head_weight.cols()) {
    throw FormatError("checkpoint parameter shapes are inconsistent");
  }
  return {std::move(p), BasisState{c.matrix("running_mu")}};
}

}  // namespace hem::model
