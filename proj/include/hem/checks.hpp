#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hem/backprop.hpp"
#include "hem/matrix.hpp"
#include "hem/stack.hpp"

// Self-generated randomized checks of the backward pass and of ELBO ascent.
// Drives the `gradcheck` command; the finite-difference and closed-form
// oracles here never call into the backward code they judge.
namespace hem::checks {

struct InstanceLimits {
  std::size_t min_n = 2;
  std::size_t max_n = 16;
  std::size_t max_k = 4;
  std::size_t max_c = 5;
  std::size_t min_t = 1;
  std::size_t max_t = 4;
};

/// A loss E = <upstream, X̃> over one HEM stack.
struct Instance {
  Matrix x;
  BasisState state;
  HemConfig cfg;
  Matrix upstream;
};

/// Clustered inputs with bases seeded near data rows, so no component dies.
/// Instances whose forward pass still reinitializes a basis are redrawn.
Instance random_instance(std::mt19937_64& rng, const InstanceLimits& limits, gmm::Kernel kernel,
                         double eta);

/// ||a - b||_2 / max(||a||_2, ||b||_2, floor) over all entries of all pairs.
double normwise_relative_error(const std::vector<Matrix>& analytic,
                               const std::vector<Matrix>& numeric, double floor = 1e-8);

struct GradcheckConfig {
  std::uint64_t seed = 0;
  std::size_t hem_instances = 200;
  std::size_t model_instances = 40;
  std::size_t skip_instances = 100;
  std::size_t elbo_instances = 100;
  double tolerance = 1e-6;       // finite-difference relative error
  double skip_tolerance = 1e-12;
  double structure_tolerance = 1e-10;
  double elbo_slack = 1e-9;
  /// Flips the sign of the N-step skip path; every gradient check must then fail.
  bool flip_nstep_skip = false;

  void validate() const;
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::size_t instances = 0;
  double worst = 0.0;  // largest observed error (or ELBO drop)
  double tolerance = 0.0;
  std::string detail;
};

CheckResult check_hem_gradients(const GradcheckConfig& cfg);
CheckResult check_model_gradients(const GradcheckConfig& cfg);
CheckResult check_skip_law(const GradcheckConfig& cfg);
CheckResult check_skip_structure(const GradcheckConfig& cfg);
CheckResult check_elbo_ascent(const GradcheckConfig& cfg);

std::vector<CheckResult> run_all(const GradcheckConfig& cfg);

}  // namespace hem::checks
