#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "advobj/compositing.hpp"
#include "advobj/models.hpp"

namespace advobj {

enum class LossMode { kProbability, kLogit };
enum class ProposalScope { kAll, kOverlapping };

std::string to_string(LossMode m);
std::string to_string(ProposalScope s);
LossMode parse_loss_mode(const std::string& s);
ProposalScope parse_proposal_scope(const std::string& s);

struct AttackConfig {
  std::size_t target_class = 2;
  double kappa = 0.1;
  double learning_rate = 0.02;
  std::size_t max_iters = 2000;
  double success_threshold = 0.95;
  std::size_t streak_length = 5;
  LossMode loss_mode = LossMode::kProbability;
  ProposalScope proposal_scope = ProposalScope::kAll;
  bool eot_enabled = true;
  /// Transforms averaged per step when EOT is on.
  std::size_t eot_samples = 1;
  PlacementSpec placement{48.0, 48.0};
  TransformDistribution transform_dist;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const AttackConfig& c);
/// Missing keys keep their defaults; unknown keys throw std::invalid_argument.
/// `target_class` may be an index or a class name resolved against `class_names`.
AttackConfig attack_config_from_json(const nlohmann::json& j,
                                     const std::vector<std::string>& class_names = {});

/// d i.i.d. standard normals. Throws std::invalid_argument for d < 2.
Tensor init_latent(std::size_t d, Rng& rng);

inline constexpr double kSigmaFloor = 1e-6;
inline constexpr double kProbFloor = 1e-12;

/// Mean and population standard deviation of the elements, sigma floored.
std::pair<double, double> estimate_latent_stats(const Tensor& z);

struct LatentStats {
  Var mu;
  Var sigma;
};
LatentStats estimate_latent_stats(const Var& z);

/// KL(N(mu, sigma^2) || N(0, 1)) = -log sigma + (sigma^2 + mu^2) / 2 - 1/2.
/// Throws std::domain_error for sigma <= 0.
double loss_kl(double mu, double sigma);
Var loss_kl(const LatentStats& stats);

/// Indices of the proposals the loss sums over.
std::vector<std::size_t> proposals_in_scope(const std::vector<Box>& boxes, ProposalScope scope,
                                            const Box& footprint);

double loss_l0(const std::vector<ProposalScore>& proposals, std::size_t target_class,
               LossMode mode, ProposalScope scope, const Box& footprint);
Var loss_l0(const Detector::Output& out, const std::vector<Box>& boxes, std::size_t target_class,
            LossMode mode, ProposalScope scope, const Box& footprint);

/// Patch footprint for an untransformed placement.
Box footprint(const PlacementSpec& placement, const Shape& patch_shape);

struct AttackLoss {
  Var total;
  Var l0;
  Var l1;
  Var composite;
  LatentStats stats;
};

/// L0 + kappa * L1 on the tape with the given transforms (averaged over L0).
AttackLoss total_loss(Tape& tape, const Var& z, const Generator& generator,
                      const Detector& detector, const Tensor& background,
                      const AttackConfig& config, std::span<const TransformParams> transforms);

/// Same, drawing transforms from config.transform_dist when EOT is enabled.
AttackLoss total_loss(Tape& tape, const Var& z, const Generator& generator,
                      const Detector& detector, const Tensor& background,
                      const AttackConfig& config, Rng& rng);

/// Consecutive-success counter; any miss resets it to zero.
class StreakCounter {
 public:
  StreakCounter(double threshold, std::size_t length) : threshold_(threshold), length_(length) {}
  /// Records one confidence; true once the streak reaches its length.
  bool observe(double confidence);
  std::size_t count() const { return count_; }

 private:
  double threshold_;
  std::size_t length_;
  std::size_t count_ = 0;
};

/// 1-based step at which the streak completes, if it does.
std::optional<std::size_t> streak_stop_step(std::span<const double> confidences, double threshold,
                                            std::size_t length);

struct TraceEntry {
  double max_confidence = 0.0;
  double l0 = 0.0;
  double l1 = 0.0;
  double total = 0.0;
};

struct AttackResult {
  Tensor z;
  Tensor patch;
  Tensor composite;  // untransformed, in the detector frame
  bool success = false;
  std::size_t iterations = 0;
  std::vector<TraceEntry> trace;
  double mu_hat = 0.0;
  double sigma_hat = 0.0;
  double final_kl = 0.0;
  double final_confidence = 0.0;
  AttackConfig config;

  nlohmann::json to_json() const;
};

/// Untransformed composite of G(z) on the background.
Tensor compose_patch(const Generator& generator, const Tensor& background, const Tensor& z,
                     const PlacementSpec& placement);

/// Max target-class probability of G(z) composited without transforms.
double patch_confidence(const Generator& generator, const Detector& detector,
                        const Tensor& background, const Tensor& z, const AttackConfig& config);

/// Checks model, background and config compatibility; throws
/// std::invalid_argument describing the first mismatch.
void check_attack_inputs(const Generator& generator, const Detector& detector,
                         const Tensor& background, const AttackConfig& config);

AttackResult run_attack(const Generator& generator, const Detector& detector,
                        const Tensor& background, const AttackConfig& config);

}  // namespace advobj
