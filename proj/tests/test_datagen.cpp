#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "hem/datagen.hpp"
#include "hem/errors.hpp"
#include "hem/stack.hpp"

namespace data = hem::data;
using hem::Matrix;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "hem_test_datagen";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Adjusted Rand index from the contingency table, written out from the
// pair-counting definition.
double adjusted_rand_index(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::map<std::pair<std::size_t, std::size_t>, double> table;
  std::map<std::size_t, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  auto pairs = [](double n) { return n * (n - 1) / 2; };
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (const auto& [_, n] : table) sum_ij += pairs(n);
  for (const auto& [_, n] : ra) sum_a += pairs(n);
  for (const auto& [_, n] : rb) sum_b += pairs(n);
  const double expected = sum_a * sum_b / pairs(static_cast<double>(a.size()));
  const double max_index = (sum_a + sum_b) / 2;
  return (sum_ij - expected) / (max_index - expected);
}

data::Dataset small_dataset() {
  data::ToySegSpec spec;
  spec.height = 6;
  spec.width = 5;
  spec.seed = 4;
  return data::gen_toy_seg_dataset(spec, 3);
}

}  // namespace

// ---------------------------------------------------------------------------
// Point clouds

TEST(PointCloud, RejectsInvalidSpecs) {
  auto bad = [](auto mutate) {
    data::PointCloudSpec s;
    mutate(s);
    return s;
  };
  EXPECT_THROW(bad([](auto& s) { s.k_true = 0; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.n_points = 1; s.k_true = 2; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.dim = 0; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.separation = -1; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.noise_std = 0; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.separation = std::nan(""); }).validate(), hem::ConfigError);
}

TEST(PointCloud, SameSeedSameOutput) {
  data::PointCloudSpec s;
  s.k_true = 3;
  s.seed = 99;
  const auto a = data::gen_point_cloud(s);
  const auto b = data::gen_point_cloud(s);
  EXPECT_TRUE(a.points == b.points);
  EXPECT_TRUE(a.centers == b.centers);
  EXPECT_EQ(a.labels, b.labels);
  s.seed = 100;
  EXPECT_FALSE(data::gen_point_cloud(s).points == a.points);
}

TEST(PointCloud, SingleBlobMeanNearCenter) {
  data::PointCloudSpec s;
  s.k_true = 1;
  s.separation = 0;
  s.n_points = 4000;
  s.dim = 3;
  s.noise_std = 2.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    s.seed = seed;
    const auto pc = data::gen_point_cloud(s);
    for (std::size_t c = 0; c < s.dim; ++c) {
      double mean = 0.0;
      for (std::size_t n = 0; n < s.n_points; ++n) mean += pc.points(n, c);
      mean /= static_cast<double>(s.n_points);
      EXPECT_LE(std::abs(mean - pc.centers(0, c)),
                5 * s.noise_std / std::sqrt(static_cast<double>(s.n_points)));
    }
  }
}

TEST(PointCloud, CentersRespectSeparationAndLabelsCycle) {
  data::PointCloudSpec s;
  s.k_true = 6;
  s.dim = 2;
  s.separation = 4;
  s.noise_std = 0.5;
  s.n_points = 50;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    s.seed = seed;
    const auto pc = data::gen_point_cloud(s);
    ASSERT_EQ(pc.points.rows(), s.n_points);
    ASSERT_EQ(pc.points.cols(), s.dim);
    for (std::size_t n = 0; n < s.n_points; ++n) EXPECT_EQ(pc.labels[n], n % s.k_true);
    for (std::size_t i = 0; i < s.k_true; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        const double d = std::hypot(pc.centers(i, 0) - pc.centers(j, 0),
                                    pc.centers(i, 1) - pc.centers(j, 1));
        EXPECT_GE(d, s.separation * s.noise_std);
      }
    }
  }
}

TEST(PointCloud, WideSeparationIsRecoveredByEm) {
  data::PointCloudSpec s;
  s.k_true = 2;
  s.dim = 2;
  s.separation = 10;
  s.n_points = 200;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    s.seed = seed;
    const auto pc = data::gen_point_cloud(s);

    // Farthest-point seeding: a random row, then the row farthest from it.
    std::mt19937_64 rng(seed);
    const std::size_t first = rng() % s.n_points;
    std::size_t second = first;
    double best = -1;
    for (std::size_t n = 0; n < s.n_points; ++n) {
      const double d = std::hypot(pc.points(n, 0) - pc.points(first, 0),
                                  pc.points(n, 1) - pc.points(first, 1));
      if (d > best) best = d, second = n;
    }
    hem::BasisState st{Matrix(2, 2)};
    for (std::size_t c = 0; c < 2; ++c) {
      st.running_mu(0, c) = pc.points(first, c);
      st.running_mu(1, c) = pc.points(second, c);
    }
    hem::HemConfig cfg;
    cfg.step_size = 1.0;
    cfg.num_layers_train = 20;
    cfg.temperature = s.noise_std * s.noise_std;
    cfg.normalize_bases = hem::BasisNorm::None;
    const auto trace = hem::hem_forward(pc.points, st, cfg);

    const Matrix& g = trace.gamma.back();
    std::vector<std::size_t> pred(s.n_points), truth(s.n_points);
    for (std::size_t n = 0; n < s.n_points; ++n) {
      pred[n] = g(n, 1) > g(n, 0) ? 1 : 0;
      truth[n] = pc.labels[n];
    }
    EXPECT_GE(adjusted_rand_index(pred, truth), 0.95) << "seed " << seed;
  }
}

TEST(PointCloud, AriOracleSanity) {
  EXPECT_DOUBLE_EQ(adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}), 1.0);
  EXPECT_LT(adjusted_rand_index({0, 1, 0, 1}, {0, 0, 1, 1}), 0.0);
}

TEST(PointCloud, DatasetWrapperKeepsAlignment) {
  data::PointCloudSpec s;
  s.k_true = 3;
  s.n_points = 30;
  const auto pc = data::gen_point_cloud(s);
  const auto ds = data::point_cloud_dataset(pc, 3);
  EXPECT_EQ(ds.kind, data::DatasetKind::PointCloud);
  ASSERT_EQ(ds.samples.size(), 1u);
  EXPECT_TRUE(ds.samples[0].raw_features == pc.points);
  EXPECT_EQ(ds.samples[0].labels, pc.labels);
}

// ---------------------------------------------------------------------------
// Toy segmentation

TEST(ToySeg, RejectsInvalidSpecs) {
  auto bad = [](auto mutate) {
    data::ToySegSpec s;
    mutate(s);
    return s;
  };
  EXPECT_THROW(bad([](auto& s) { s.num_shapes = 0; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.num_shapes = 5; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.num_classes = 1; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.num_classes = 9; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.height = 65; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.width = 1; }).validate(), hem::ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.pixel_noise_std = -0.1; }).validate(), hem::ConfigError);
  EXPECT_THROW(data::gen_toy_seg_dataset(data::ToySegSpec{}, 0), hem::ConfigError);
}

TEST(ToySeg, ShapesAndCoordinateRange) {
  data::ToySegSpec s;
  s.height = 7;
  s.width = 11;
  s.num_classes = 4;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    s.seed = seed;
    const auto sample = data::gen_toy_seg(s);
    ASSERT_EQ(sample.raw_features.rows(), s.height * s.width);
    ASSERT_EQ(sample.raw_features.cols(), data::kSegFeatureDim);
    ASSERT_EQ(sample.labels.size(), s.height * s.width);
    for (std::size_t n = 0; n < sample.labels.size(); ++n) {
      EXPECT_LT(sample.labels[n], s.num_classes);
      const std::size_t r = n / s.width, c = n % s.width;
      EXPECT_DOUBLE_EQ(sample.raw_features(n, 3), static_cast<double>(c) / (s.width - 1));
      EXPECT_DOUBLE_EQ(sample.raw_features(n, 4), static_cast<double>(r) / (s.height - 1));
    }
  }
}

TEST(ToySeg, DeterministicPerSeed) {
  data::ToySegSpec s;
  s.seed = 12;
  const auto a = data::gen_toy_seg(s);
  const auto b = data::gen_toy_seg(s);
  EXPECT_TRUE(a.raw_features == b.raw_features);
  EXPECT_EQ(a.labels, b.labels);

  const auto da = data::gen_toy_seg_dataset(s, 4);
  const auto db = data::gen_toy_seg_dataset(s, 4);
  ASSERT_EQ(da.samples.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(da.samples[i].raw_features == db.samples[i].raw_features);
  }
  EXPECT_FALSE(da.samples[0].raw_features == da.samples[1].raw_features);
}

TEST(ToySeg, NoiselessClassesAreLinearlySeparable) {
  data::ToySegSpec s;
  s.pixel_noise_std = 0;
  s.num_classes = 5;
  s.num_shapes = 4;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    s.seed = seed;
    const auto sample = data::gen_toy_seg(s);
    for (std::size_t n = 0; n < sample.labels.size(); ++n) {
      const auto color = data::class_color(sample.labels[n]);
      for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(sample.raw_features(n, c), color[c]);
      // Nearest base color is a linear rule: argmax_l <x, c_l> - |c_l|^2 / 2.
      std::size_t best = 0;
      double best_score = -1e300;
      for (std::size_t l = 0; l < s.num_classes; ++l) {
        const auto cl = data::class_color(l);
        double score = 0;
        for (std::size_t c = 0; c < 3; ++c) {
          score += sample.raw_features(n, c) * cl[c] - 0.5 * cl[c] * cl[c];
        }
        if (score > best_score) best_score = score, best = l;
      }
      EXPECT_EQ(best, sample.labels[n]);
    }
  }
}

TEST(ToySeg, ClassColorsAreDistinct) {
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < i; ++j) EXPECT_NE(data::class_color(i), data::class_color(j));
  }
}

TEST(ToySeg, DigestReportsCounts) {
  data::Dataset ds;
  ds.num_classes = 3;
  ds.samples.push_back({Matrix(4, 5), {0, 0, 2, 1}});
  ds.samples.push_back({Matrix(2, 5), {2, 2}});
  EXPECT_EQ(data::digest(ds), "samples=2 rows=6 feature_dim=5 classes=3 histogram=[2,1,3]");
}

// ---------------------------------------------------------------------------
// Container and dataset files

TEST(Container, SaveLoadIsBitwise) {
  const auto ds = small_dataset();
  const auto path = temp_path("roundtrip.bin");
  data::save_dataset(ds, path);
  const auto back = data::load_dataset(path);
  EXPECT_EQ(back.kind, ds.kind);
  EXPECT_EQ(back.height, ds.height);
  EXPECT_EQ(back.width, ds.width);
  EXPECT_EQ(back.num_classes, ds.num_classes);
  ASSERT_EQ(back.samples.size(), ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& a = ds.samples[i].raw_features.values();
    const auto& b = back.samples[i].raw_features.values();
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
    EXPECT_EQ(back.samples[i].labels, ds.samples[i].labels);
  }
  // Saving again reproduces the same bytes.
  const auto path2 = temp_path("roundtrip2.bin");
  data::save_dataset(back, path2);
  EXPECT_EQ(slurp(path), slurp(path2));
}

TEST(Container, SpecialValuesSurvive) {
  data::Container c;
  c.put("m", Matrix{{-0.0, 1e-310, std::numeric_limits<double>::max()}});
  c.put("l", data::Labels{0, 4294967295u});
  const auto back = data::Container::deserialize(c.serialize());
  const auto& m = back.matrix("m");
  EXPECT_TRUE(std::signbit(m(0, 0)));
  EXPECT_EQ(m(0, 1), 1e-310);
  EXPECT_EQ(back.labels("l")[1], 4294967295u);
  EXPECT_THROW(back.matrix("l"), hem::FormatError);
  EXPECT_THROW(back.labels("m"), hem::FormatError);
  EXPECT_THROW(back.matrix("missing"), hem::FormatError);
}

TEST(Container, HeaderLayout) {
  data::Container c;
  const auto bytes = c.serialize();
  ASSERT_EQ(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 8), std::string(data::kContainerMagic, 8));
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), data::kContainerVersion);
}

TEST(Container, EveryTruncationIsAFormatError) {
  const auto bytes = [] {
    data::Container c;
    c.put("mat", Matrix{{1, 2}, {3, 4}});
    c.put("lab", data::Labels{1, 2, 3});
    return c.serialize();
  }();
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    EXPECT_THROW(data::Container::deserialize(bytes.substr(0, len)), hem::FormatError)
        << "length " << len;
  }
}

TEST(Container, TruncatedFileOnDisk) {
  const auto path = temp_path("truncated.bin");
  data::save_dataset(small_dataset(), path);
  const auto bytes = slurp(path);
  spit(path, bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(data::load_dataset(path), hem::FormatError);
}

TEST(Container, VersionMismatchIsExplicit) {
  auto bytes = data::Container{}.serialize();
  bytes[8] = static_cast<char>(data::kContainerVersion + 1);
  EXPECT_THROW(data::Container::deserialize(bytes), hem::UnsupportedVersionError);
}

TEST(Container, BadMagicAndTrailingBytes) {
  auto bytes = data::Container{}.serialize();
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(data::Container::deserialize(bad), hem::FormatError);
  EXPECT_THROW(data::Container::deserialize(bytes + "x"), hem::FormatError);
}

TEST(Container, UnknownEntryKind) {
  data::Container c;
  c.put("l", data::Labels{1});
  auto bytes = c.serialize();
  // Header (16) + name length (4) + name (1), then the kind field.
  bytes[21] = 9;
  EXPECT_THROW(data::Container::deserialize(bytes), hem::FormatError);
}

TEST(Container, IoErrors) {
  EXPECT_THROW(data::load_dataset(temp_path("does_not_exist.bin")), hem::IoError);
  EXPECT_THROW(data::save_dataset(small_dataset(), temp_path("no_such_dir") / "x.bin"),
               hem::IoError);
}

TEST(Container, DatasetLabelOutOfRangeRejected) {
  auto ds = small_dataset();
  ds.samples[1].labels[0] = static_cast<std::uint32_t>(ds.num_classes);
  const auto path = temp_path("bad_label.bin");
  data::save_dataset(ds, path);
  EXPECT_THROW(data::load_dataset(path), hem::FormatError);
}
