#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hem/gmm.hpp"
#include "hem/matrix.hpp"

// The unrolled highway-EM stack: T layers of (E-step, N-step) followed by
// one R-step, plus the running initial bases shared across batches.
namespace hem {

enum class BasisNorm { None, L2Rows };

const char* to_string(BasisNorm norm);
BasisNorm basis_norm_from_string(const std::string& name);

struct HemConfig {
  std::size_t num_layers_train = 3;
  std::size_t num_layers_eval = 3;
  double step_size = 0.5;                 // eta in (0, 1]
  std::optional<double> temperature;      // empty means sqrt(C)
  gmm::Kernel kernel = gmm::Kernel::Rbf;
  double momentum = 0.9;                  // moving-average factor for mu^(0)
  BasisNorm normalize_bases = BasisNorm::L2Rows;
  std::uint64_t reinit_seed = 0;          // dead-basis reinitialization stream

  /// Throws ConfigError on the first invalid field.
  void validate() const;
  double resolve_temperature(std::size_t channels) const;
};

/// A dead basis that was re-seeded from an input row during the forward pass.
struct ReinitEvent {
  std::size_t layer;      // 1-based layer index t
  std::size_t component;  // k
  std::size_t source_row; // n
};

struct HemTrace {
  std::vector<Matrix> mu;       // mu^(0) .. mu^(T)
  std::vector<Matrix> gamma;    // gamma^(1) .. gamma^(T), stored at [t-1]
  std::vector<Matrix> mu_em;    // M-step outputs F^EM(mu^(t-1), X), stored at [t-1]
  std::vector<gmm::ElboValue> elbo;  // L(mu^(t), gamma^(t)), stored at [t-1]
  Matrix reconstruction;        // X̃ = gamma^(T)·mu^(T)
  std::vector<ReinitEvent> reinit_events;

  double temperature = 0.0;
  double step_size = 0.0;
  gmm::Kernel kernel = gmm::Kernel::Rbf;

  std::size_t layers() const noexcept { return gamma.size(); }
  const Matrix& final_mu() const { return mu.back(); }
};

struct BasisState {
  Matrix running_mu;  // K×C
};

BasisState init_bases(std::size_t k, std::size_t c, std::uint64_t seed, BasisNorm normalize);

/// Runs t_override (or cfg.num_layers_train) highway-EM layers starting from
/// state.running_mu. Pure: the state is not modified.
HemTrace hem_forward(const Matrix& x, const BasisState& state, const HemConfig& cfg,
                     std::optional<std::size_t> t_override = std::nullopt);

/// running_mu <- momentum·running_mu + (1-momentum)·mu_final_batch, then optional
/// row normalization. Training only.
BasisState moving_average_update(const BasisState& state, const Matrix& mu_final_batch,
                                 double momentum, BasisNorm normalize);

/// One forward trace per requested depth, all from the same mu^(0).
std::vector<HemTrace> eval_extrapolate(const Matrix& x, const BasisState& state,
                                       const HemConfig& cfg,
                                       std::span<const std::size_t> t_values);

void normalize_rows_l2(Matrix& m);

}  // namespace hem
