#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "hem/matrix.hpp"

namespace hem::data {

using Labels = std::vector<std::uint32_t>;

struct PointCloudSpec {
  std::size_t n_points = 256;
  std::size_t k_true = 2;
  std::size_t dim = 2;
  double separation = 6.0;  // minimum inter-center distance in units of noise_std
  double noise_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PointCloud {
  Matrix points;  // n_points × dim
  Labels labels;
  Matrix centers;  // k_true × dim
};

/// Isotropic Gaussian blobs; point n belongs to component n mod k_true.
PointCloud gen_point_cloud(const PointCloudSpec& spec);

struct ToySegSpec {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t num_shapes = 3;   // 1..4
  std::size_t num_classes = 3;  // background + shape classes
  double pixel_noise_std = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-pixel features: r, g, b, then column and row coordinates scaled to [0,1].
inline constexpr std::size_t kSegFeatureDim = 5;

struct SegSample {
  Matrix raw_features;  // (H·W) × 5
  Labels labels;        // H·W class ids
};

SegSample gen_toy_seg(const ToySegSpec& spec);

/// Base color of a class; class 0 is the background.
std::array<double, 3> class_color(std::size_t cls);

enum class DatasetKind : std::uint32_t { ToySeg = 0, PointCloud = 1 };

struct Dataset {
  DatasetKind kind = DatasetKind::ToySeg;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::vector<SegSample> samples;

  std::size_t feature_dim() const {
    return samples.empty() ? 0 : samples.front().raw_features.cols();
  }
};

/// `count` images; image i uses a seed derived from (spec.seed, i).
Dataset gen_toy_seg_dataset(const ToySegSpec& spec, std::size_t count);
Dataset point_cloud_dataset(const PointCloud& cloud, std::size_t num_classes);

/// Human-readable summary: sample and row counts plus class histogram.
std::string digest(const Dataset& dataset);

// ---------------------------------------------------------------------------
// Binary container: 16-byte header (8-byte magic, u32 version, u32 entry
// count), then named entries. Each entry is u32 name length, name bytes,
// u32 kind, and either (u64 rows, u64 cols, f64 values) or (u64 length, u32
// values). Everything little-endian.

inline constexpr char kContainerMagic[8] = {'H', 'E', 'M', 'D', 'S', 'E', 'T', '\0'};
inline constexpr std::uint32_t kContainerVersion = 1;

using Entry = std::variant<Matrix, Labels>;

class Container {
 public:
  void put(const std::string& name, Entry value);
  bool contains(const std::string& name) const;
  const Matrix& matrix(const std::string& name) const;
  const Labels& labels(const std::string& name) const;
  const std::vector<std::pair<std::string, Entry>>& entries() const { return entries_; }

  std::string serialize() const;
  static Container deserialize(const std::string& bytes);

 private:
  const Entry& find(const std::string& name) const;
  std::vector<std::pair<std::string, Entry>> entries_;
};

void save_container(const Container& container, const std::filesystem::path& path);
Container load_container(const std::filesystem::path& path);

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace hem::data
