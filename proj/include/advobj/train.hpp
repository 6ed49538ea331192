#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "advobj/models.hpp"
#include "advobj/scene.hpp"

namespace advobj {

/// Thrown when a trainer finishes its epoch budget without meeting the
/// configured targets. Carries the achieved metrics.
class TrainingTargetError : public std::runtime_error {
 public:
  TrainingTargetError(const std::string& what, nlohmann::json metrics)
      : std::runtime_error(what), metrics_(std::move(metrics)) {}
  const nlohmann::json& metrics() const { return metrics_; }

 private:
  nlohmann::json metrics_;
};

struct DetectorTrainConfig {
  SceneSpec scenes = SceneSpec::reference();
  std::size_t train_scenes = 1000;
  std::size_t heldout_scenes = 100;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double learning_rate = 0.003;
  /// Learning-rate multiplier for the last quarter of the epochs.
  double final_lr_scale = 0.3;
  std::uint64_t seed = 0;
  double positive_iou = 0.4;
  double negative_iou = 0.25;
  /// Extra loss term over the background anchors the model is least sure of.
  std::size_t hard_negatives = 8;
  // Acceptance targets on the held-out scenes.
  double detect_prob = 0.9;
  double clear_prob = 0.5;
  double required_rate = 0.95;
  bool require_targets = true;
};

struct DetectorMetrics {
  std::size_t sign_scenes = 0;
  std::size_t free_scenes = 0;
  double detected_rate = 0.0;  // sign scenes with every sign found at detect_prob
  double clear_rate = 0.0;     // sign-free scenes with all foreground probs < clear_prob
  double gray_max_prob = 0.0;  // max foreground prob on a uniform 0.5 image
  double final_loss = 0.0;
  bool targets_met = false;

  nlohmann::json to_json() const;
};

struct TrainedDetector {
  Detector detector;
  DetectorMetrics metrics;
};

/// Held-out scenes use seeds derived from (config.seed, "heldout").
std::vector<SyntheticScene> heldout_scenes(const DetectorTrainConfig& config);

/// Trains on `train_set` when given. Otherwise every epoch renders
/// `train_scenes` new scenes with seeds derived from (config.seed, "train").
/// Metrics use `heldout` when given, else heldout_scenes(config).
TrainedDetector train_detector(const DetectorTrainConfig& config,
                               const std::vector<SyntheticScene>* train_set = nullptr,
                               const std::vector<SyntheticScene>* heldout = nullptr);

DetectorMetrics evaluate_detector(const Detector& detector,
                                  const std::vector<SyntheticScene>& heldout,
                                  const DetectorTrainConfig& config);

struct GeneratorTrainConfig {
  PatchSpec patches;
  std::size_t latent_dim = 32;
  std::size_t train_patches = 2000;
  std::size_t heldout_patches = 100;
  std::size_t epochs = 15;
  std::size_t batch_size = 16;
  double learning_rate = 0.002;
  /// Per-pixel squared error is weighted by 1 / (2 * recon_variance).
  double recon_variance = 0.01;
  std::uint64_t seed = 0;
  double max_heldout_mse = 0.03;
  double min_channel_variance = 0.005;
  bool require_targets = true;
};

struct GeneratorMetrics {
  double heldout_mse = 0.0;
  std::array<double, 3> channel_variance{};
  double final_loss = 0.0;
  bool targets_met = false;

  nlohmann::json to_json() const;
};

struct TrainedGenerator {
  Generator generator;
  GeneratorMetrics metrics;
};

/// Trains the decoder of a variational autoencoder over logo-like patches;
/// the decoder becomes the generator.
TrainedGenerator train_generator(const GeneratorTrainConfig& config,
                                 const std::vector<Tensor>* train_set = nullptr);

/// Per-channel spread of generator outputs for z ~ N(0, I): the mean over
/// pixels of the across-sample variance.
std::array<double, 3> sample_channel_variance(const Generator& generator, std::size_t samples,
                                              std::uint64_t seed);

}  // namespace advobj
