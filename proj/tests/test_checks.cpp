#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "hem/checks.hpp"
#include "hem/errors.hpp"

namespace checks = hem::checks;
using hem::Matrix;

namespace {

checks::GradcheckConfig small_config() {
  checks::GradcheckConfig c;
  c.seed = 21;
  c.hem_instances = 30;
  c.model_instances = 8;
  c.skip_instances = 30;
  c.elbo_instances = 30;
  return c;
}

}  // namespace

TEST(NormwiseRelativeError, Examples) {
  EXPECT_EQ(checks::normwise_relative_error({Matrix{{1, 2}}}, {Matrix{{1, 2}}}), 0.0);
  // |(3,4) - (3,4.5)| / max(5, |(3,4.5)|)
  EXPECT_NEAR(checks::normwise_relative_error({Matrix{{3, 4}}}, {Matrix{{3, 4.5}}}),
              0.5 / std::hypot(3.0, 4.5), 1e-15);
  // Both tiny: the floor keeps the ratio small.
  EXPECT_NEAR(checks::normwise_relative_error({Matrix{{1e-12}}}, {Matrix{{0.0}}}), 1e-4, 1e-18);
  // Norms pool across all pairs.
  EXPECT_NEAR(checks::normwise_relative_error({Matrix{{3.0}}, Matrix{{4.0}}},
                                              {Matrix{{3.0}}, Matrix{{4.0 + 1e-3}}}),
              1e-3 / std::hypot(3.0, 4.001), 1e-15);
  EXPECT_THROW(checks::normwise_relative_error({Matrix(1, 2)}, {Matrix(2, 1)}), hem::ShapeError);
}

TEST(RandomInstance, RespectsLimitsAndNeverReinitializes) {
  std::mt19937_64 rng(3);
  checks::InstanceLimits lim;
  for (int rep = 0; rep < 100; ++rep) {
    const auto kernel = rep % 2 ? hem::gmm::Kernel::Dot : hem::gmm::Kernel::Rbf;
    const auto inst = checks::random_instance(rng, lim, kernel, 0.5);
    EXPECT_GE(inst.x.rows(), lim.min_n);
    EXPECT_LE(inst.x.rows(), lim.max_n);
    EXPECT_LE(inst.state.running_mu.rows(), lim.max_k);
    EXPECT_LE(inst.x.cols(), lim.max_c);
    EXPECT_TRUE(inst.upstream.same_shape(inst.x));
    EXPECT_GE(inst.cfg.num_layers_train, lim.min_t);
    EXPECT_LE(inst.cfg.num_layers_train, lim.max_t);
    EXPECT_EQ(inst.cfg.step_size, 0.5);
    EXPECT_EQ(inst.cfg.kernel, kernel);
    EXPECT_TRUE(hem::hem_forward(inst.x, inst.state, inst.cfg).reinit_events.empty());
  }
}

TEST(GradcheckConfig, Validation) {
  auto c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.tolerance = 0;
  EXPECT_THROW(c.validate(), hem::ConfigError);
  c = small_config();
  c.elbo_slack = -1;
  EXPECT_THROW(c.validate(), hem::ConfigError);
}

TEST(RunAll, CorrectBackwardPassesEveryCheck) {
  const auto results = checks::run_all(small_config());
  ASSERT_EQ(results.size(), 5u);
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed) << r.name << ": worst " << r.worst << " tol " << r.tolerance << " "
                          << r.detail;
    EXPECT_GT(r.instances, 0u) << r.name;
    EXPECT_LE(r.worst, r.tolerance) << r.name;
  }
}

TEST(RunAll, FlippedSkipPathIsCaught) {
  auto c = small_config();
  c.flip_nstep_skip = true;
  bool hem_failed = false, skip_failed = false, elbo_passed = false;
  for (const auto& r : checks::run_all(c)) {
    if (r.name == "stack gradient vs finite differences") hem_failed = !r.passed;
    if (r.name == "skip-connection gradient law") skip_failed = !r.passed;
    // Forward-only check is unaffected by a backward fault.
    if (r.name == "per-layer ELBO ascent") elbo_passed = r.passed;
  }
  EXPECT_TRUE(hem_failed);
  EXPECT_TRUE(skip_failed);
  EXPECT_TRUE(elbo_passed);
}

TEST(RunAll, ZeroCountsSkipChecks) {
  auto c = small_config();
  c.hem_instances = 0;
  c.model_instances = 0;
  const auto results = checks::run_all(c);
  EXPECT_EQ(results.size(), 3u);
}
