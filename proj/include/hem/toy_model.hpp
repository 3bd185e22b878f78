#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "hem/backprop.hpp"
#include "hem/datagen.hpp"
#include "hem/diagnostics.hpp"
#include "hem/matrix.hpp"
#include "hem/stack.hpp"

// Smallest end-to-end model that routes loss gradients through the HEM stack
// into a backbone:
//
//   raw ──[tanh hidden]──> affine backbone ──> X ──> HEM stack ──> X̃ ──> affine head ──> logits
//
// With use_hem = false the head reads X directly (the linear baseline).
namespace hem::model {

struct ModelConfig {
  std::size_t channels = 8;    // C
  std::size_t num_bases = 4;   // K
  std::size_t hidden = 0;      // 0 disables the tanh hidden layer
  bool use_hem = true;

  void validate() const;
};

/// Also used to hold gradients of the same shapes.
struct ToyModelParams {
  Matrix hidden_weight;    // D×H (empty when hidden = 0)
  Matrix hidden_bias;      // 1×H
  Matrix backbone_weight;  // D×C or H×C
  Matrix backbone_bias;    // 1×C
  Matrix head_weight;      // C×L
  Matrix head_bias;        // 1×L

  std::size_t num_classes() const { return head_weight.cols(); }
  bool all_finite() const;
  ToyModelParams zeros_like() const;
  void add_scaled(const ToyModelParams& other, double scale);
};

/// Glorot-uniform weights, zero biases.
ToyModelParams init_params(std::size_t input_dim, std::size_t num_classes,
                           const ModelConfig& cfg, std::uint64_t seed);

struct ForwardResult {
  Matrix hidden;    // tanh activations (empty without hidden layer)
  Matrix features;  // X
  std::optional<HemTrace> trace;
  Matrix logits;
};

ForwardResult model_forward(const Matrix& raw, const ToyModelParams& params,
                            const BasisState& state, const HemConfig& hem_cfg,
                            const ModelConfig& cfg,
                            std::optional<std::size_t> t_override = std::nullopt);

struct LossResult {
  double loss = 0.0;
  Matrix grad_logits;
};

/// Mean negative log-softmax of the true class; gradient (softmax - onehot)/N.
LossResult cross_entropy(const Matrix& logits, const data::Labels& labels);

struct ModelGradients {
  ToyModelParams params;
  std::optional<backprop::HemGradients> hem;
  Matrix grad_features;  // dE/dX
};

ModelGradients model_backward(const Matrix& raw, const ToyModelParams& params,
                              const ForwardResult& fwd, const Matrix& grad_logits,
                              const HemConfig& hem_cfg, const ModelConfig& cfg,
                              backprop::GradMode mode = backprop::GradMode::Exact);

/// p <- p - lr·g. Throws TrainingError on non-finite gradients.
ToyModelParams sgd_step(const ToyModelParams& params, const ToyModelParams& grads, double lr);

struct TrainConfig {
  double learning_rate = 0.1;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  HemConfig hem;
  ModelConfig model;
  std::size_t log_interval = 200;  // steps between probe-set gradient profiles
  std::size_t probe_size = 100;    // images in the fixed probe set

  void validate() const;
};

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> elbo;  // batch-mean ELBO per layer (empty without HEM)
};

struct MetricsHistory {
  std::vector<StepMetrics> steps;
  std::vector<diag::LayerGradStats> grad_stats;
};

struct TrainResult {
  ToyModelParams params;
  BasisState state;
  MetricsHistory history;
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  double final_elbo = 0.0;  // summed over samples; 0 without HEM
};

/// Parameters and bases exactly as `train` starts from them.
std::pair<ToyModelParams, BasisState> initial_model(std::size_t input_dim,
                                                    std::size_t num_classes,
                                                    const TrainConfig& cfg);

/// Dataset rows must match the config: raw feature dim and label range.
TrainResult train(const data::Dataset& dataset, const TrainConfig& cfg);

EvalResult evaluate(const data::Dataset& dataset, const ToyModelParams& params,
                    const BasisState& state, const HemConfig& hem_cfg, const ModelConfig& cfg,
                    std::optional<std::size_t> layers = std::nullopt);

/// Fixed probe subset (sample indices) drawn from the training seed.
std::vector<std::size_t> probe_indices(std::size_t dataset_size, std::size_t probe_size,
                                       std::uint64_t seed);

/// Exact and skip-only gradient profile averaged over the probe images.
diag::LayerGradStats probe_grad_profile(const data::Dataset& dataset,
                                        const std::vector<std::size_t>& probe,
                                        const ToyModelParams& params, const BasisState& state,
                                        const HemConfig& hem_cfg, const ModelConfig& cfg,
                                        std::size_t step);

// Checkpoint (params + running bases) in the dataset container format.
data::Container to_checkpoint(const ToyModelParams& params, const BasisState& state);
std::pair<ToyModelParams, BasisState> from_checkpoint(const data::Container& c);

}  // namespace hem::model
