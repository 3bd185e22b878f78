#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "hem/backprop.hpp"
#include "hem/checks.hpp"
#include "hem/diagnostics.hpp"
#include "hem/errors.hpp"
#include "test_util.hpp"

namespace diag = hem::diag;
namespace bp = hem::backprop;
using hem::Matrix;

namespace {

struct Profiled {
  hem::checks::Instance inst;
  hem::HemTrace trace;
  bp::HemGradients exact;
  bp::HemGradients skip;
};

Profiled profiled(std::uint64_t seed, double eta, std::size_t layers, bool zero_upstream = false) {
  std::mt19937_64 rng(seed);
  hem::checks::InstanceLimits lim;
  lim.min_t = layers;
  lim.max_t = layers;
  Profiled p{hem::checks::random_instance(rng, lim, hem::gmm::Kernel::Rbf, eta), {}, {}, {}};
  if (zero_upstream) p.inst.upstream = Matrix(p.inst.x.rows(), p.inst.x.cols());
  p.trace = hem::hem_forward(p.inst.x, p.inst.state, p.inst.cfg);
  p.exact = bp::hem_backward(p.trace, p.inst.x, p.inst.cfg, p.inst.upstream, bp::GradMode::Exact);
  p.skip =
      bp::hem_backward(p.trace, p.inst.x, p.inst.cfg, p.inst.upstream, bp::GradMode::SkipOnly);
  return p;
}

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "hem_test_diagnostics";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double entropy_of(std::initializer_list<double> p) {
  double h = 0;
  for (double v : p) h -= v * std::log(v);
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// grad_profile

TEST(GradProfile, ZeroUpstreamGivesZeroStats) {
  const auto p = profiled(1, 0.5, 3, true);
  const auto s = diag::grad_profile(p.trace, p.exact, p.skip);
  ASSERT_EQ(s.per_layer_mean_abs_grad_x.size(), 3u);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(s.per_layer_mean_abs_grad_x[t], 0.0);
    EXPECT_EQ(s.estep_component_norm[t], 0.0);
    EXPECT_EQ(s.per_layer_grad_mu_norm[t], 0.0);
  }
  EXPECT_EQ(s.total_mean_abs_grad_x, 0.0);
}

TEST(GradProfile, FullStepLeavesOnlyTheLastLayerOnTheSkipPath) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = profiled(seed, 1.0, 4);
    const auto s = diag::grad_profile(p.trace, p.exact, p.skip);
    for (std::size_t t = 0; t + 1 < 4; ++t) EXPECT_EQ(s.per_layer_grad_mu_norm[t], 0.0);
    EXPECT_GT(s.per_layer_grad_mu_norm[3], 0.0);
  }
}

TEST(GradProfile, HalfStepGradMuNormsHalvePerLayer) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = profiled(seed, 0.5, 3);
    const auto s = diag::grad_profile(p.trace, p.exact, p.skip);
    const double last = s.per_layer_grad_mu_norm[2];
    ASSERT_GT(last, 0.0);
    EXPECT_NEAR(s.per_layer_grad_mu_norm[0] / last, 0.25, 1e-12);
    EXPECT_NEAR(s.per_layer_grad_mu_norm[1] / last, 0.5, 1e-12);
  }
}

TEST(GradProfile, EStepComponentIsTheExactMinusSkipResidual) {
  const auto p = profiled(3, 0.4, 3);
  const auto s = diag::grad_profile(p.trace, p.exact, p.skip, 17);
  EXPECT_EQ(s.step, 17u);
  for (std::size_t t = 0; t < 3; ++t) {
    const Matrix& e = p.exact.per_layer_grad_x_contrib[t];
    const Matrix& k = p.skip.per_layer_grad_x_contrib[t];
    double resid = 0, skip = 0;
    for (std::size_t i = 0; i < e.size(); ++i) {
      resid += std::abs(e.values()[i] - k.values()[i]);
      skip += std::abs(k.values()[i]);
    }
    EXPECT_NEAR(s.estep_component_norm[t], resid / e.size(), 1e-15);
    EXPECT_NEAR(s.per_layer_mean_abs_grad_x[t], skip / e.size(), 1e-15);
    EXPECT_GE(s.estep_component_norm[t], 0.0);
  }
  double total = 0;
  for (double v : p.exact.grad_x.values()) total += std::abs(v);
  EXPECT_NEAR(s.total_mean_abs_grad_x, total / p.exact.grad_x.size(), 1e-15);
}

TEST(GradProfile, MismatchedDepthIsAConsistencyError) {
  const auto p = profiled(4, 0.5, 3);
  const auto other = profiled(4, 0.5, 2);
  EXPECT_THROW(diag::grad_profile(p.trace, p.exact, other.skip), hem::ConsistencyError);
  EXPECT_THROW(diag::grad_profile(other.trace, p.exact, p.skip), hem::ConsistencyError);
}

TEST(GradProfile, AverageIsEntrywise) {
  diag::LayerGradStats a{1, {1, 2}, {0, 4}, 2, {1, 1}};
  diag::LayerGradStats b{1, {3, 6}, {2, 0}, 4, {3, 5}};
  const diag::LayerGradStats both[] = {a, b};
  const auto m = diag::average(both);
  EXPECT_EQ(m.per_layer_mean_abs_grad_x, (std::vector<double>{2, 4}));
  EXPECT_EQ(m.estep_component_norm, (std::vector<double>{1, 2}));
  EXPECT_EQ(m.per_layer_grad_mu_norm, (std::vector<double>{2, 3}));
  EXPECT_EQ(m.total_mean_abs_grad_x, 3);
  b.per_layer_mean_abs_grad_x.push_back(1);
  const diag::LayerGradStats mixed[] = {a, b};
  EXPECT_THROW(diag::average(mixed), hem::ConsistencyError);
  EXPECT_THROW(diag::average({}), hem::ConsistencyError);
}

// ---------------------------------------------------------------------------
// layer_entropy and reweighting

TEST(LayerEntropy, Examples) {
  EXPECT_EQ(diag::layer_entropy(std::vector<double>{0, 0, 5}), 0.0);
  EXPECT_EQ(diag::layer_entropy(std::vector<double>{2}), 0.0);
  EXPECT_NEAR(diag::layer_entropy(std::vector<double>{1, 1, 1, 1}), std::log(4.0), 1e-15);
  EXPECT_NEAR(diag::layer_entropy(std::vector<double>{1, 2}), entropy_of({1.0 / 3, 2.0 / 3}),
              1e-15);
}

TEST(LayerEntropy, RejectsDegenerateProfiles) {
  EXPECT_THROW(diag::layer_entropy(std::vector<double>{0, 0}), hem::ConsistencyError);
  EXPECT_THROW(diag::layer_entropy(std::vector<double>{}), hem::ConsistencyError);
  EXPECT_THROW(diag::layer_entropy(std::vector<double>{1, -1}), hem::ConsistencyError);
  EXPECT_THROW(diag::layer_entropy(std::vector<double>{1, std::nan("")}), hem::ConsistencyError);
}

TEST(LayerEntropy, BoundedByLogDepth) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> p(1 + rng() % 8);
    for (double& v : p) v = u(rng);
    const double h = diag::layer_entropy(p);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(static_cast<double>(p.size())) + 1e-12);
  }
}

TEST(ReweightSkipProfile, TwoLayersWithEqualFactorsAtHalfStep) {
  // Equal gamma factors measured at eta = 0.3 carry weights 0.3·0.7 and 0.3.
  const std::vector<double> measured{0.3 * 0.7, 0.3};
  const auto at_half = diag::reweight_skip_profile(measured, 0.3, 0.5);
  EXPECT_NEAR(at_half[0], 0.25, 1e-15);
  EXPECT_NEAR(at_half[1], 0.5, 1e-15);
  EXPECT_NEAR(diag::layer_entropy(at_half), entropy_of({1.0 / 3, 2.0 / 3}), 1e-15);
}

TEST(ReweightSkipProfile, IdentityAtTheMeasuredStep) {
  const std::vector<double> p{0.1, 0.7, 0.2};
  EXPECT_EQ(diag::reweight_skip_profile(p, 0.4, 0.4), p);
  EXPECT_THROW(diag::reweight_skip_profile(p, 1.0, 0.5), hem::ConfigError);
  EXPECT_THROW(diag::reweight_skip_profile(p, 0.0, 0.5), hem::ConfigError);
}

TEST(ReweightSkipProfile, MatchesARealSkipOnlyRunAtAnotherStep) {
  // With the trace held fixed, the skip-only layer contributions scale exactly
  // by eta(1-eta)^(T-t); rerunning the backward with a different eta must agree.
  const auto p = profiled(6, 0.5, 4);
  auto cfg = p.inst.cfg;
  cfg.step_size = 0.2;
  auto trace = p.trace;
  trace.step_size = 0.2;
  const auto skip2 =
      bp::hem_backward(trace, p.inst.x, cfg, p.inst.upstream, bp::GradMode::SkipOnly);
  const auto s1 = diag::grad_profile(p.trace, p.exact, p.skip);
  std::vector<double> direct;
  for (const auto& m : skip2.per_layer_grad_x_contrib) {
    double a = 0;
    for (double v : m.values()) a += std::abs(v);
    direct.push_back(a / m.size());
  }
  const auto rew = diag::reweight_skip_profile(s1.per_layer_mean_abs_grad_x, 0.5, 0.2);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_NEAR(rew[t], direct[t], 1e-12 * direct[t]);
}

TEST(ReweightSkipProfile, EqualFactorsGiveEntropyDecreasingInStepSize) {
  for (std::size_t layers = 2; layers <= 8; ++layers) {
    const std::vector<double> flat(layers, 1.0);
    double prev = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= 9; ++i) {
      const double eta = 0.1 * i;
      // A flat profile measured at 0.5 has unit gamma factors up to a constant.
      std::vector<double> measured(layers);
      for (std::size_t t = 0; t < layers; ++t) {
        measured[t] = 0.5 * std::pow(0.5, static_cast<double>(layers - 1 - t));
      }
      const double h = diag::layer_entropy(diag::reweight_skip_profile(measured, 0.5, eta));
      EXPECT_LT(h, prev) << "T=" << layers << " eta=" << eta;
      prev = h;
    }
  }
}

// ---------------------------------------------------------------------------
// ElboCurve

TEST(ElboCurve, FromTraceAndMonotonicity) {
  const auto p = profiled(2, 0.5, 4);
  const auto c = diag::ElboCurve::from_trace(p.trace);
  ASSERT_EQ(c.totals.size(), 4u);
  EXPECT_EQ(c.eta, 0.5);
  EXPECT_EQ(c.kernel, hem::gmm::Kernel::Rbf);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(c.totals[t], p.trace.elbo[t].total);
  EXPECT_TRUE(c.non_decreasing());

  diag::ElboCurve dip;
  dip.totals = {1.0, 1.0 - 5e-10, 2.0};
  EXPECT_TRUE(dip.non_decreasing(1e-9));
  EXPECT_FALSE(dip.non_decreasing(1e-10));
}

// ---------------------------------------------------------------------------
// CSV and JSON

TEST(Csv, GoldenHeader) {
  EXPECT_EQ(diag::to_csv({}), "step,layer,metric,value,eta,T,kernel,seed\n");
}

TEST(Csv, RowFormat) {
  const diag::MetricRecord r{12, 2, "elbo", -0.1, 0.5, 3, "rbf", 42};
  const diag::MetricRecord rows[] = {r};
  EXPECT_EQ(diag::to_csv(rows),
            "step,layer,metric,value,eta,T,kernel,seed\n12,2,elbo,-0.1,0.5,3,rbf,42\n");
}

TEST(Csv, ValuesRoundTripExactly) {
  std::mt19937_64 rng(10);
  std::vector<double> vals{0.0,  -0.0, 1.0 / 3, 1e-300, 5e-324, -1.7976931348623157e308,
                           0.1,  123456789.123456789, std::nextafter(1.0, 2.0)};
  std::uniform_int_distribution<std::uint64_t> bits;
  while (vals.size() < 2000) {
    const std::uint64_t b = bits(rng);
    double v;
    std::memcpy(&v, &b, sizeof v);
    if (std::isfinite(v)) vals.push_back(v);
  }
  std::vector<diag::MetricRecord> recs;
  for (std::size_t i = 0; i < vals.size(); ++i) recs.push_back({i, 1, "m", vals[i], 0.5, 2, "dot", 1});

  const auto path = temp_path("roundtrip.csv");
  diag::emit_csv(recs, path);
  std::istringstream in(slurp(path));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, diag::kCsvHeader);
  std::size_t i = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    ASSERT_EQ(f.size(), 8u);
    // Shortest round-trip form: at most 17 significant digits.
    std::size_t digits = 0;
    bool leading = true;
    for (char ch : f[3].substr(0, f[3].find('e'))) {
      if (!std::isdigit(static_cast<unsigned char>(ch))) continue;
      if (leading && ch == '0') continue;
      leading = false;
      ++digits;
    }
    EXPECT_LE(digits, 17u) << f[3];
    const double back = std::strtod(f[3].c_str(), nullptr);
    EXPECT_EQ(std::memcmp(&back, &vals[i], sizeof back), 0) << f[3];
    ++i;
  }
  EXPECT_EQ(i, vals.size());
}

TEST(Csv, NonFiniteValuesAreRefused) {
  for (double bad : {std::nan(""), std::numeric_limits<double>::infinity()}) {
    const diag::MetricRecord rows[] = {{0, 0, "m", bad, 0.5, 1, "rbf", 0}};
    EXPECT_THROW(diag::to_csv(rows), hem::ConsistencyError);
    EXPECT_THROW(diag::summarize(rows), hem::ConsistencyError);
  }
}

TEST(Csv, EmitIsDeterministicAndNewlineTerminated) {
  const auto p = profiled(5, 0.5, 3);
  std::vector<diag::MetricRecord> recs;
  diag::append_grad_stats(recs, diag::grad_profile(p.trace, p.exact, p.skip, 4),
                          {0, 0, "", 0, 0.5, 3, "rbf", 9});
  // Three metrics per layer, then the total and the entropy.
  ASSERT_EQ(recs.size(), 3u * 3 + 2);
  EXPECT_EQ(recs.back().metric, "layer_entropy");
  EXPECT_EQ(recs.front().step, 4u);
  const auto a = temp_path("a.csv"), b = temp_path("b.csv");
  diag::emit_csv(recs, a);
  diag::emit_csv(recs, b);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(slurp(a).back(), '\n');
}

TEST(Csv, UnwritablePathIsAnIoError) {
  const auto path = temp_path("missing_dir") / "x.csv";
  EXPECT_THROW(diag::emit_csv({}, path), hem::IoError);
  EXPECT_THROW(diag::emit_summary_json({}, path), hem::IoError);
}

TEST(SummaryJson, KeepsTheLastValuePerMetricAndLayer) {
  const std::vector<diag::MetricRecord> recs{
      {0, 1, "elbo", 1.0, 0.5, 2, "rbf", 3}, {0, 2, "elbo", 2.0, 0.5, 2, "rbf", 3},
      {1, 0, "loss", 0.7, 0.5, 2, "rbf", 3}, {2, 1, "elbo", 1.5, 0.5, 2, "rbf", 3},
      {2, 0, "loss", 0.4, 0.5, 2, "rbf", 3},
  };
  const auto j = diag::summarize(recs);
  EXPECT_EQ(j["records"], 5);
  EXPECT_EQ(j["final_step"], 2);
  EXPECT_EQ(j["kernel"], "rbf");
  EXPECT_EQ(j["final"]["loss"], 0.4);
  EXPECT_EQ(j["final"]["elbo"]["1"], 1.5);
  EXPECT_EQ(j["final"]["elbo"]["2"], 2.0);

  const auto path = temp_path("summary.json");
  diag::emit_summary_json(recs, path);
  EXPECT_EQ(nlohmann::json::parse(slurp(path)), nlohmann::json::parse(j.dump()));
  EXPECT_EQ(diag::summarize({})["records"], 0);
}
