#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "advobj/attack.hpp"
#include "advobj/train.hpp"

namespace advobj {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitTrainingTarget = 3,
  kExitAttackFailed = 4,
  kExitGradcheck = 5,
};

/// Bad run configuration; maps to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DetectorEntry {
  std::string name;
  std::filesystem::path path;
};

/// Everything a command needs. Relative paths in a config file resolve
/// against the file's directory; defaults point into the data directory.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  std::size_t parallel = 1;

  std::filesystem::path generator;
  std::vector<DetectorEntry> detectors;
  std::filesystem::path background;
  AttackConfig attack;

  std::filesystem::path detector_dataset;
  DetectorTrainConfig detector_train;
  std::filesystem::path generator_dataset;
  GeneratorTrainConfig generator_train;

  std::filesystem::path viewpoints;
  std::size_t n_seeds = 10;
  std::size_t attacks_per_source = 5;
  std::optional<double> transfer_threshold;  // defaults to the attack threshold
  double report_floor = 0.10;
  std::optional<std::filesystem::path> patch;
  std::vector<std::filesystem::path> backgrounds;  // defaults to {background}

  static RunConfig defaults(const std::filesystem::path& data_dir);
};

/// Unknown keys anywhere raise ConfigError naming the key.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir,
                               const std::filesystem::path& data_dir);

std::filesystem::path default_data_dir();

/// Entry point shared by the executable and the tests. args excludes argv[0].
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace advobj
