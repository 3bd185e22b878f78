#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hem/checks.hpp"
#include "hem/datagen.hpp"
#include "hem/toy_model.hpp"

// Config-driven commands behind the `hemctl` executable. Every command reads
// one JSON config, validates all of it, loads its inputs, and only then
// creates the output directory. stdout receives the paths of written files;
// stderr receives everything meant for a human.
namespace hem::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitTraining = 4,
  kExitCheckFailed = 5,
};

inline constexpr const char* kCommands[] = {"gen", "train", "gradcheck", "sweep", "fig3"};

/// Where a command's samples come from: a dataset file or an inline generator spec.
struct DataSource {
  std::optional<std::filesystem::path> dataset_path;
  std::string kind = "toy_seg";  // or "point_cloud"
  std::size_t num_images = 32;
  data::ToySegSpec toy_seg;
  data::PointCloudSpec point_cloud;
};

struct SweepSpec {
  std::vector<double> eta_train{0.25, 0.5, 0.75, 1.0};
  std::vector<std::size_t> t_train{1, 3, 5};
  std::vector<std::size_t> t_eval{1, 2, 4, 8};
  bool parallel = false;
};

enum class Fig3Source { Init, Checkpoint, TrainInline };

struct Fig3Spec {
  std::vector<double> eta_grid{0.2, 0.5, 1.0};
  std::size_t num_layers = 0;  // 0 means hem.num_layers_train
  Fig3Source source = Fig3Source::Init;
  std::optional<std::filesystem::path> checkpoint;
};

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  DataSource data;
  model::TrainConfig train;  // also carries the model and HEM sections
  SweepSpec sweep;
  Fig3Spec fig3;
  checks::GradcheckConfig gradcheck;
};

/// Validates `doc` for `command`. Relative paths resolve against `base_dir`;
/// `seed_override` replaces the top-level seed. Throws ConfigError.
RunConfig parse_config(const std::string& command, const nlohmann::json& doc,
                       std::optional<std::uint64_t> seed_override,
                       const std::filesystem::path& base_dir);

/// Fully resolved form, defaults included; parsing it yields the same RunConfig.
nlohmann::ordered_json to_json(const RunConfig& cfg);

struct Invocation {
  std::string command;
  std::filesystem::path config_path;
  std::filesystem::path out_dir;
  std::optional<std::uint64_t> seed;
};

/// Runs one command and maps failures onto ExitCode.
int run(const Invocation& inv, std::ostream& out, std::ostream& err);

}  // namespace hem::cli
