#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hem/backprop.hpp"
#include "hem/gmm.hpp"
#include "hem/stack.hpp"

// Per-layer ELBO and gradient-flow measurements, and their CSV/JSON emission.
namespace hem::diag {

struct LayerGradStats {
  std::size_t step = 0;
  /// Mean |dE/dX| contributed by each layer through the N-step alone (skip-only backward).
  std::vector<double> per_layer_mean_abs_grad_x;
  /// Mean |exact - skip-only| per-layer contribution: what the E-step adds.
  std::vector<double> estep_component_norm;
  /// Mean |dE/dX| of the exact total gradient.
  double total_mean_abs_grad_x = 0.0;
  /// Frobenius norm of dE/dmu^(t) under skip-only backward.
  std::vector<double> per_layer_grad_mu_norm;
};

/// `exact` and `skip_only` must both come from hem_backward on `trace`.
LayerGradStats grad_profile(const HemTrace& trace, const backprop::HemGradients& exact,
                            const backprop::HemGradients& skip_only, std::size_t step = 0);

/// Equal-weight average of profiles with the same layer count.
LayerGradStats average(std::span<const LayerGradStats> stats);

/// Shannon entropy of the normalized per-layer N-step gradient profile, in [0, ln T].
double layer_entropy(const LayerGradStats& stats);
double layer_entropy(std::span<const double> profile);

/// Rescales a skip-only profile measured at `eta_measured` to the weights
/// eta(1-eta)^(T-t) of another step size, holding the gamma-dependent factors fixed.
std::vector<double> reweight_skip_profile(std::span<const double> profile, double eta_measured,
                                          double eta);

struct ElboCurve {
  std::vector<double> totals;  // layer 1..T
  double eta = 0.0;
  gmm::Kernel kernel = gmm::Kernel::Rbf;

  static ElboCurve from_trace(const HemTrace& trace);
  bool non_decreasing(double slack = 1e-9) const;
};

// ---------------------------------------------------------------------------
// Emission

/// One CSV row. layer = 0 marks a metric that is not per-layer.
struct MetricRecord {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::string metric;
  double value = 0.0;
  double eta = 0.0;
  std::size_t layers = 0;  // T
  std::string kernel;
  std::uint64_t seed = 0;
};

inline constexpr const char* kCsvHeader = "step,layer,metric,value,eta,T,kernel,seed";

/// Shortest representation that round-trips, capped at 17 significant digits.
std::string format_double(double v);

std::string to_csv(std::span<const MetricRecord> records);
void emit_csv(std::span<const MetricRecord> records, const std::filesystem::path& path);

/// Final value of every (metric, layer) pair plus record count.
nlohmann::ordered_json summarize(std::span<const MetricRecord> records);
void emit_summary_json(std::span<const MetricRecord> records, const std::filesystem::path& path);

void append_grad_stats(std::vector<MetricRecord>& out, const LayerGradStats& stats,
                       const MetricRecord& tag);

/// Writes text with a trailing newline; throws IoError.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace hem::diag
