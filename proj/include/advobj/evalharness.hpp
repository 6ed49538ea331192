#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "advobj/attack.hpp"

namespace advobj {

struct NamedDetector {
  std::string name;
  const Detector* detector = nullptr;
};

/// One attack outcome as needed for transfer evaluation.
struct TransferSample {
  Tensor composite;  // untransformed composite the source attack produced
  std::size_t target_class = 0;
  bool success = false;
};

TransferSample transfer_sample(const AttackResult& r);

struct TransferMatrix {
  std::vector<std::string> models;
  double threshold = 0.0;
  std::vector<std::size_t> attacks;     // per source: attacks considered
  std::vector<std::size_t> successful;  // per source: successful on the source itself
  /// percent[source][target]; nullopt on the diagonal and for sources with no
  /// successful attack.
  std::vector<std::vector<std::optional<double>>> percent;
  /// Diagonal recomputed with a fresh forward pass, for verification.
  std::vector<std::optional<double>> self_transfer;

  nlohmann::json to_json() const;
};

/// samples[i] holds the attacks crafted against detectors[i]. Throws
/// std::invalid_argument for fewer than two models or mismatched sizes.
TransferMatrix eval_transfer(const std::vector<std::vector<TransferSample>>& samples,
                             const std::vector<NamedDetector>& detectors, double threshold,
                             std::size_t parallel = 1);

struct Viewpoint {
  std::string label;
  double scale = 1.0;
  double dx = 0.0;
  double dy = 0.0;
  double brightness = 1.0;
  double smoothing_sigma = 0.0;

  TransformParams transform() const { return {dx, dy, brightness, scale, smoothing_sigma}; }
};

std::vector<Viewpoint> default_viewpoints();
std::vector<Viewpoint> viewpoints_from_json(const nlohmann::json& j);
nlohmann::json to_json(const std::vector<Viewpoint>& v);
std::vector<Viewpoint> load_viewpoints(const std::filesystem::path& path);

inline constexpr double kReportFloor = 0.10;

struct RobustnessGrid {
  std::vector<std::string> positions;
  std::vector<std::string> detectors;
  std::size_t target_class = 0;
  double floor = kReportFloor;
  /// confidence[position][detector]: max target-class probability.
  std::vector<std::vector<double>> confidence;

  bool detected(std::size_t position, std::size_t detector) const {
    return confidence[position][detector] >= floor;
  }
  nlohmann::json to_json() const;
};

/// Throws std::invalid_argument naming the position when a viewpoint is
/// invalid or moves the patch outside the frame.
RobustnessGrid eval_robustness(const Tensor& patch, const Tensor& background,
                               const std::vector<Viewpoint>& viewpoints,
                               const std::vector<NamedDetector>& detectors,
                               std::size_t target_class, const PlacementSpec& placement,
                               double floor = kReportFloor, std::size_t parallel = 1);

struct SeedRecord {
  std::uint64_t seed = 0;
  bool success = false;
  std::size_t iterations = 0;
  double final_confidence = 0.0;
  double final_kl = 0.0;
  double sigma_hat = 0.0;
};

struct SuccessRate {
  double fraction = 0.0;
  std::vector<SeedRecord> records;
  std::vector<AttackResult> results;

  nlohmann::json to_json() const;
};

/// Seeds config.seed, config.seed + 1, ...; run i uses backgrounds[i % size].
SuccessRate eval_success_rate(const Generator& generator, const Detector& detector,
                              const std::vector<Tensor>& backgrounds, const AttackConfig& config,
                              std::size_t n_seeds, std::size_t parallel = 1);

enum class ReportFormat { kCsv, kJson };

/// CSV schemas:
///   transfer:     source,target,percent   (off-diagonal; undefined -> NA)
///   robustness:   position,detector,confidence   (below floor -> not_detected)
///   success-rate: seed,success,iterations,final_confidence,final_kl,sigma_hat
std::string render_report(const TransferMatrix& m, ReportFormat f);
std::string render_report(const RobustnessGrid& g, ReportFormat f);
std::string render_report(const SuccessRate& s, ReportFormat f);

/// Writes the rendered report; throws std::runtime_error if the path is not
/// writable.
template <typename Report>
void export_report(const Report& report, const std::filesystem::path& path, ReportFormat f);

void write_text_file(const std::filesystem::path& path, const std::string& text);

/// Shortest round-trip decimal form.
std::string format_number(double v);

}  // namespace advobj
