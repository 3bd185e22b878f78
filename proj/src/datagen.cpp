#include "hem/datagen.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace hem::data {

void PointCloudSpec::validate() const {
  if (k_true < 1) throw ConfigError("point_cloud.k_true must be >= 1");
  if (n_points < k_true) throw ConfigError("point_cloud.n_points must be >= k_true");
  if (dim < 1) throw ConfigError("point_cloud.dim must be >= 1");
  if (!(separation >= 0.0)) throw ConfigError("point_cloud.separation must be >= 0");
  if (!(noise_std > 0.0)) throw ConfigError("point_cloud.noise_std must be > 0");
}

PointCloud gen_point_cloud(const PointCloudSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const double min_dist = spec.separation * spec.noise_std;
  // Box wide enough that rejection sampling rarely struggles.
  const double half_side = std::max(1.0, min_dist * static_cast<double>(spec.k_true)) *
                           std::max(1.0, std::pow(static_cast<double>(spec.k_true),
                                                  1.0 / static_cast<double>(spec.dim)) / 2.0);
  std::uniform_real_distribution<double> box(-half_side, half_side);

  constexpr int kMaxRetries = 10000;
  Matrix centers(spec.k_true, spec.dim);
  for (std::size_t k = 0; k < spec.k_true; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxRetries && !placed; ++attempt) {
      for (double& v : centers.row(k)) v = box(rng);
      placed = true;
      for (std::size_t j = 0; j < k && placed; ++j) {
        double d2 = 0.0;
        for (std::size_t c = 0; c < spec.dim; ++c) {
          const double d = centers(k, c) - centers(j, c);
          d2 += d * d;
        }
        placed = std::sqrt(d2) >= min_dist;
      }
    }
    if (!placed) {
      throw DataError("could not place center " + std::to_string(k) + " at separation " +
                      std::to_string(spec.separation));
    }
  }

  PointCloud out{Matrix(spec.n_points, spec.dim), Labels(spec.n_points), centers};
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  for (std::size_t n = 0; n < spec.n_points; ++n) {
    const std::size_t k = n % spec.k_true;
    out.labels[n] = static_cast<std::uint32_t>(k);
    for (std::size_t c = 0; c < spec.dim; ++c) out.points(n, c) = centers(k, c) + noise(rng);
  }
  return out;
}

void ToySegSpec::validate() const {
  if (height < 2 || height > 64 || width < 2 || width > 64) {
    throw ConfigError("toy_seg height and width must lie in [2, 64]");
  }
  if (num_shapes < 1 || num_shapes > 4) throw ConfigError("toy_seg.num_shapes must lie in [1, 4]");
  if (num_classes < 2 || num_classes > 8) throw ConfigError("toy_seg.num_classes must lie in [2, 8]");
  if (!(pixel_noise_std >= 0.0)) throw ConfigError("toy_seg.pixel_noise_std must be >= 0");
}

std::array<double, 3> class_color(std::size_t cls) {
  static constexpr std::array<std::array<double, 3>, 8> kPalette = {{
      {0.50, 0.50, 0.50},
      {0.80, 0.30, 0.30},
      {0.30, 0.75, 0.35},
      {0.30, 0.35, 0.80},
      {0.80, 0.75, 0.30},
      {0.75, 0.30, 0.75},
      {0.30, 0.75, 0.75},
      {0.15, 0.15, 0.15},
  }};
  return kPalette.at(cls);
}

SegSample gen_toy_seg(const ToySegSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t h = spec.height;
  const std::size_t w = spec.width;
  Labels labels(h * w, 0);

  std::uniform_int_distribution<std::size_t> pick_class(1, spec.num_classes - 1);
  std::uniform_int_distribution<int> pick_kind(0, 1);
  const std::size_t min_extent = std::max<std::size_t>(2, std::min(h, w) / 5);
  const std::size_t max_extent = std::max(min_extent, std::min(h, w) / 2);
  std::uniform_int_distribution<std::size_t> pick_extent(min_extent, max_extent);

  for (std::size_t s = 0; s < spec.num_shapes; ++s) {
    const auto cls = static_cast<std::uint32_t>(pick_class(rng));
    const bool circle = pick_kind(rng) == 1;
    const std::size_t eh = pick_extent(rng);
    const std::size_t ew = pick_extent(rng);
    const std::size_t top = std::uniform_int_distribution<std::size_t>(0, h - eh)(rng);
    const std::size_t left = std::uniform_int_distribution<std::size_t>(0, w - ew)(rng);
    const double cy = static_cast<double>(top) + (static_cast<double>(eh) - 1.0) / 2.0;
    const double cx = static_cast<double>(left) + (static_cast<double>(ew) - 1.0) / 2.0;
    const double ry = static_cast<double>(eh) / 2.0;
    const double rx = static_cast<double>(ew) / 2.0;
    for (std::size_t r = top; r < top + eh; ++r) {
      for (std::size_t c = left; c < left + ew; ++c) {
        if (circle) {
          const double dy = (static_cast<double>(r) - cy) / ry;
          const double dx = (static_cast<double>(c) - cx) / rx;
          if (dy * dy + dx * dx > 1.0) continue;
        }
        labels[r * w + c] = cls;
      }
    }
  }

  SegSample out{Matrix(h * w, kSegFeatureDim), std::move(labels)};
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t p = r * w + c;
      const auto color = class_color(out.labels[p]);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        // Always draw so the stream does not depend on the noise level.
        const double z = noise(rng);
        out.raw_features(p, ch) = color[ch] + spec.pixel_noise_std * z;
      }
      out.raw_features(p, 3) = static_cast<double>(c) / static_cast<double>(w - 1);
      out.raw_features(p, 4) = static_cast<double>(r) / static_cast<double>(h - 1);
    }
  }
  return out;
}

Dataset gen_toy_seg_dataset(const ToySegSpec& spec, std::size_t count) {
  spec.validate();
  if (count < 1) throw ConfigError("toy_seg.num_images must be >= 1");
  Dataset ds{DatasetKind::ToySeg, spec.height, spec.width, spec.num_classes, {}};
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ToySegSpec image = spec;
    std::seed_seq seq{spec.seed, static_cast<std::uint64_t>(i)};
    std::array<std::uint32_t, 2> words{};
    seq.generate(words.begin(), words.end());
    image.seed = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
    ds.samples.push_back(gen_toy_seg(image));
  }
  return ds;
}

Dataset point_cloud_dataset(const PointCloud& cloud, std::size_t num_classes) {
  Dataset ds{DatasetKind::PointCloud, cloud.points.rows(), 1, num_classes, {}};
  ds.samples.push_back(SegSample{cloud.points, cloud.labels});
  return ds;
}

std::string digest(const Dataset& dataset) {
  std::vector<std::size_t> hist(dataset.num_classes, 0);
  std::size_t rows = 0;
  for (const auto& s : dataset.samples) {
    rows += s.raw_features.rows();
    for (auto l : s.labels) {
      if (l < hist.size()) ++hist[l];
    }
  }
  std::ostringstream os;
  os << "samples=" << dataset.samples.size() << " rows=" << rows
     << " feature_dim=" << dataset.feature_dim() << " classes=" << dataset.num_classes
     << " histogram=[";
  for (std::size_t i = 0; i < hist.size(); ++i) os << (i ? "," : "") << hist[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Container

namespace {

enum : std::uint32_t { kEntryMatrix = 1, kEntryLabels = 2 };

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw FormatError("truncated container");
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Container::put(const std::string& name, Entry value) {
  for (auto& [key, v] : entries_) {
    if (key == name) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(name, std::move(value));
}

bool Container::contains(const std::string& name) const {
  for (const auto& [key, v] : entries_) {
    if (key == name) return true;
  }
  return false;
}

const Entry& Container::find(const std::string& name) const {
  for (const auto& [key, v] : entries_) {
    if (key == name) return v;
  }
  throw FormatError("container has no entry '" + name + "'");
}

const Matrix& Container::matrix(const std::string& name) const {
  const auto* m = std::get_if<Matrix>(&find(name));
  if (!m) throw FormatError("entry '" + name + "' is not a matrix");
  return *m;
}

const Labels& Container::labels(const std::string& name) const {
  const auto* l = std::get_if<Labels>(&find(name));
  if (!l) throw FormatError("entry '" + name + "' is not a label array");
  return *l;
}

std::string Container::serialize() const {
  std::string out(kContainerMagic, sizeof(kContainerMagic));
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, value] : entries_) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    if (const auto* m = std::get_if<Matrix>(&value)) {
      put_le<std::uint32_t>(out, kEntryMatrix);
      put_le<std::uint64_t>(out, m->rows());
      put_le<std::uint64_t>(out, m->cols());
      for (double v : m->values()) put_le<double>(out, v);
    } else {
      const auto& l = std::get<Labels>(value);
      put_le<std::uint32_t>(out, kEntryLabels);
      put_le<std::uint64_t>(out, l.size());
      for (auto v : l) put_le<std::uint32_t>(out, v);
    }
  }
  return out;
}

Container Container::deserialize(const std::string& bytes) {
  Reader in(bytes);
  if (in.get_string(sizeof(kContainerMagic)) != std::string(kContainerMagic, sizeof(kContainerMagic))) {
    throw FormatError("bad magic: not a dataset/checkpoint container");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kContainerVersion) {
    throw UnsupportedVersionError("unsupported container version " + std::to_string(version) +
                                  " (expected " + std::to_string(kContainerVersion) + ")");
  }
  const auto count = in.get<std::uint32_t>();
  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = in.get_string(in.get<std::uint32_t>());
    const auto kind = in.get<std::uint32_t>();
    if (kind == kEntryMatrix) {
      const auto rows = in.get<std::uint64_t>();
      const auto cols = in.get<std::uint64_t>();
      if (cols != 0 && rows > in.remaining() / 8 / cols) throw FormatError("truncated container");
      std::vector<double> values(rows * cols);
      for (double& v : values) v = in.get<double>();
      c.put(name, Matrix(rows, cols, std::move(values)));
    } else if (kind == kEntryLabels) {
      const auto len = in.get<std::uint64_t>();
      if (len > in.remaining() / 4) throw FormatError("truncated container");
      Labels values(len);
      for (auto& v : values) v = in.get<std::uint32_t>();
      c.put(name, std::move(values));
    } else {
      throw FormatError("unknown entry kind " + std::to_string(kind));
    }
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after last entry");
  return c;
}

void save_container(const Container& container, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const auto bytes = container.serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Container load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return Container::deserialize(buf.str());
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  Container c;
  c.put("meta", Labels{static_cast<std::uint32_t>(dataset.kind),
                       static_cast<std::uint32_t>(dataset.height),
                       static_cast<std::uint32_t>(dataset.width),
                       static_cast<std::uint32_t>(dataset.num_classes),
                       static_cast<std::uint32_t>(dataset.samples.size())});
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    c.put("features/" + std::to_string(i), dataset.samples[i].raw_features);
    c.put("labels/" + std::to_string(i), dataset.samples[i].labels);
  }
  save_container(c, path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  const Container c = load_container(path);
  const auto& meta = c.labels("meta");
  if (meta.size() != 5) throw FormatError("dataset meta entry must hold 5 values");
  if (meta[0] > 1) throw FormatError("unknown dataset kind");
  Dataset ds{static_cast<DatasetKind>(meta[0]), meta[1], meta[2], meta[3], {}};
  ds.samples.reserve(meta[4]);
  for (std::uint32_t i = 0; i < meta[4]; ++i) {
    SegSample s{c.matrix("features/" + std::to_string(i)), c.labels("labels/" + std::to_string(i))};
    if (s.labels.size() != s.raw_features.rows()) {
      throw FormatError("sample " + std::to_string(i) + ": label count != feature rows");
    }
    for (auto l : s.labels) {
      if (l >= ds.num_classes) throw FormatError("label out of range in sample " + std::to_string(i));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace hem::data
