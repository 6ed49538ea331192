#include "advobj/attack.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "advobj/adam.hpp"

namespace advobj {

std::string to_string(LossMode m) { return m == LossMode::kLogit ? "logit" : "probability"; }

std::string to_string(ProposalScope s) {
  return s == ProposalScope::kOverlapping ? "overlapping" : "all";
}

LossMode parse_loss_mode(const std::string& s) {
  if (s == "probability") return LossMode::kProbability;
  if (s == "logit") return LossMode::kLogit;
  throw std::invalid_argument("loss_mode: expected 'probability' or 'logit', got '" + s + "'");
}

ProposalScope parse_proposal_scope(const std::string& s) {
  if (s == "all") return ProposalScope::kAll;
  if (s == "overlapping") return ProposalScope::kOverlapping;
  throw std::invalid_argument("proposal_scope: expected 'all' or 'overlapping', got '" + s + "'");
}

void AttackConfig::validate() const {
  if (!(kappa >= 0.0)) throw std::invalid_argument("attack config: kappa must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("attack config: learning_rate must be > 0");
  if (max_iters < 1) throw std::invalid_argument("attack config: max_iters must be >= 1");
  if (!(success_threshold > 0.0 && success_threshold < 1.0)) {
    throw std::invalid_argument("attack config: success_threshold must lie in (0,1)");
  }
  if (streak_length < 1) throw std::invalid_argument("attack config: streak_length must be >= 1");
  if (eot_samples < 1) throw std::invalid_argument("attack config: eot_samples must be >= 1");
  if (target_class == 0) {
    throw std::invalid_argument("attack config: target_class 0 is the background class");
  }
  transform_dist.validate();
}

nlohmann::json to_json(const AttackConfig& c) {
  return {{"target_class", c.target_class},
          {"kappa", c.kappa},
          {"learning_rate", c.learning_rate},
          {"max_iters", c.max_iters},
          {"success_threshold", c.success_threshold},
          {"streak_length", c.streak_length},
          {"loss_mode", to_string(c.loss_mode)},
          {"proposal_scope", to_string(c.proposal_scope)},
          {"eot_enabled", c.eot_enabled},
          {"eot_samples", c.eot_samples},
          {"placement", to_json(c.placement)},
          {"transform_dist", to_json(c.transform_dist)},
          {"seed", c.seed}};
}

AttackConfig attack_config_from_json(const nlohmann::json& j,
                                     const std::vector<std::string>& class_names) {
  static const std::set<std::string> allowed{
      "target_class", "kappa",       "learning_rate",  "max_iters",   "success_threshold",
      "streak_length", "loss_mode",  "proposal_scope", "eot_enabled", "eot_samples",
      "placement",    "transform_dist", "seed"};
  if (!j.is_object()) throw std::invalid_argument("attack config: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw std::invalid_argument("attack config: unknown key '" + it.key() + "'");
    }
  }
  AttackConfig c;
  try {
    if (j.contains("target_class")) {
      const auto& t = j.at("target_class");
      if (t.is_string()) {
        const auto name = t.get<std::string>();
        const auto it = std::find(class_names.begin(), class_names.end(), name);
        if (it == class_names.end()) {
          throw std::invalid_argument("attack config: unknown target class '" + name + "'");
        }
        c.target_class = static_cast<std::size_t>(it - class_names.begin());
      } else {
        c.target_class = t.get<std::size_t>();
      }
    }
    c.kappa = j.value("kappa", c.kappa);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_iters = j.value("max_iters", c.max_iters);
    c.success_threshold = j.value("success_threshold", c.success_threshold);
    c.streak_length = j.value("streak_length", c.streak_length);
    if (j.contains("loss_mode")) c.loss_mode = parse_loss_mode(j.at("loss_mode").get<std::string>());
    if (j.contains("proposal_scope")) {
      c.proposal_scope = parse_proposal_scope(j.at("proposal_scope").get<std::string>());
    }
    c.eot_enabled = j.value("eot_enabled", c.eot_enabled);
    c.eot_samples = j.value("eot_samples", c.eot_samples);
    if (j.contains("placement")) c.placement = placement_from_json(j.at("placement"));
    if (j.contains("transform_dist")) {
      c.transform_dist = transform_distribution_from_json(j.at("transform_dist"));
    }
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("attack config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor init_latent(std::size_t d, Rng& rng) {
  if (d < 2) {
    throw std::invalid_argument("init_latent: need at least 2 elements to estimate a variance, got " +
                                std::to_string(d));
  }
  Tensor z({d});
  for (double& v : z.data()) v = rng.normal();
  return z;
}

std::pair<double, double> estimate_latent_stats(const Tensor& z) {
  if (z.size() < 2) throw std::invalid_argument("estimate_latent_stats: need at least 2 elements");
  const double n = static_cast<double>(z.size());
  double s = 0.0;
  for (double v : z.data()) s += v;
  const double mu = s / n;
  double ss = 0.0;
  for (double v : z.data()) ss += (v - mu) * (v - mu);
  return {mu, std::max(std::sqrt(ss / n), kSigmaFloor)};
}

LatentStats estimate_latent_stats(const Var& z) {
  if (z.value().size() < 2) {
    throw std::invalid_argument("estimate_latent_stats: need at least 2 elements");
  }
  const Var mu = mean(z);
  const Var d = sub(z, mu);
  const Var sigma = clamp_min(sqrt(mean(mul(d, d))), kSigmaFloor);
  return {mu, sigma};
}

double loss_kl(double mu, double sigma) {
  if (!(sigma > 0.0)) throw std::domain_error("loss_kl: sigma must be positive");
  return -std::log(sigma) + (sigma * sigma + mu * mu) / 2.0 - 0.5;
}

Var loss_kl(const LatentStats& s) {
  if (!(s.sigma.value().item() > 0.0)) throw std::domain_error("loss_kl: sigma must be positive");
  const Var quad = scalar_scale(add(mul(s.sigma, s.sigma), mul(s.mu, s.mu)), 0.5);
  return add_scalar(sub(quad, log(s.sigma)), -0.5);
}

std::vector<std::size_t> proposals_in_scope(const std::vector<Box>& boxes, ProposalScope scope,
                                            const Box& footprint) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (scope == ProposalScope::kAll || boxes[i].intersects(footprint)) idx.push_back(i);
  }
  if (idx.empty()) {
    throw std::invalid_argument("loss_l0: no proposal overlaps the patch footprint");
  }
  return idx;
}

double loss_l0(const std::vector<ProposalScore>& proposals, std::size_t target_class,
               LossMode mode, ProposalScope scope, const Box& footprint) {
  if (proposals.empty()) throw std::invalid_argument("loss_l0: no proposals");
  std::vector<Box> boxes;
  for (const auto& p : proposals) boxes.push_back(p.box);
  double total = 0.0;
  for (std::size_t i : proposals_in_scope(boxes, scope, footprint)) {
    const auto& p = proposals[i];
    if (target_class >= p.probs.size()) throw std::out_of_range("loss_l0: target class out of range");
    total -= mode == LossMode::kLogit ? p.logits[target_class]
                                      : std::log(p.probs[target_class] + kProbFloor);
  }
  return total;
}

Var loss_l0(const Detector::Output& out, const std::vector<Box>& boxes, std::size_t target_class,
            LossMode mode, ProposalScope scope, const Box& footprint) {
  const Shape& s = out.logits.shape();
  if (boxes.empty() || s[0] != boxes.size()) {
    throw std::invalid_argument("loss_l0: proposal boxes do not match detector output");
  }
  if (target_class >= s[1]) throw std::out_of_range("loss_l0: target class out of range");
  std::vector<std::size_t> flat;
  for (std::size_t i : proposals_in_scope(boxes, scope, footprint)) {
    flat.push_back(i * s[1] + target_class);
  }
  if (mode == LossMode::kLogit) {
    return scalar_scale(sum(gather(reshape(out.logits, {s[0] * s[1]}), flat)), -1.0);
  }
  const Var p = gather(reshape(out.probs, {s[0] * s[1]}), flat);
  return scalar_scale(sum(log(add_scalar(p, kProbFloor))), -1.0);
}

Box footprint(const PlacementSpec& placement, const Shape& patch_shape) {
  return {placement.x, placement.y, static_cast<double>(patch_shape[2]),
          static_cast<double>(patch_shape[1])};
}

AttackLoss total_loss(Tape& tape, const Var& z, const Generator& generator,
                      const Detector& detector, const Tensor& background,
                      const AttackConfig& config, std::span<const TransformParams> transforms) {
  if (transforms.empty()) throw std::invalid_argument("total_loss: no transforms");
  const Var patch = generator.generate(tape, z);
  const Var bg = tape.constant(background);
  const Box fp = footprint(config.placement, generator.patch_shape());
  AttackLoss out;
  for (const auto& t : transforms) {
    const Var composite = apply_transform(patch, bg, t, config.placement);
    const Var l0 = loss_l0(detector.forward(tape, composite), detector.proposal_boxes(),
                           config.target_class, config.loss_mode, config.proposal_scope, fp);
    out.l0 = out.l0.valid() ? add(out.l0, l0) : l0;
    if (!out.composite.valid()) out.composite = composite;
  }
  if (transforms.size() > 1) out.l0 = scalar_scale(out.l0, 1.0 / static_cast<double>(transforms.size()));
  out.stats = estimate_latent_stats(z);
  out.l1 = loss_kl(out.stats);
  out.total = add(out.l0, scalar_scale(out.l1, config.kappa));
  return out;
}

AttackLoss total_loss(Tape& tape, const Var& z, const Generator& generator,
                      const Detector& detector, const Tensor& background,
                      const AttackConfig& config, Rng& rng) {
  std::vector<TransformParams> ts;
  if (config.eot_enabled) {
    for (std::size_t i = 0; i < config.eot_samples; ++i) {
      ts.push_back(sample_transform(config.transform_dist, rng));
    }
  } else {
    ts.push_back(TransformParams::identity());
  }
  return total_loss(tape, z, generator, detector, background, config, ts);
}

bool StreakCounter::observe(double confidence) {
  count_ = confidence >= threshold_ ? count_ + 1 : 0;
  return count_ >= length_;
}

std::optional<std::size_t> streak_stop_step(std::span<const double> confidences, double threshold,
                                            std::size_t length) {
  StreakCounter counter(threshold, length);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    if (counter.observe(confidences[i])) return i + 1;
  }
  return std::nullopt;
}

Tensor compose_patch(const Generator& generator, const Tensor& background, const Tensor& z,
                     const PlacementSpec& placement) {
  Tape tape;
  const Var patch = generator.generate(tape, tape.constant(z));
  return apply_transform(patch, tape.constant(background), TransformParams::identity(), placement)
      .value();
}

double patch_confidence(const Generator& generator, const Detector& detector,
                        const Tensor& background, const Tensor& z, const AttackConfig& config) {
  return detector.max_class_prob(compose_patch(generator, background, z, config.placement),
                                 config.target_class);
}

void check_attack_inputs(const Generator& generator, const Detector& detector,
                         const Tensor& background, const AttackConfig& config) {
  config.validate();
  if (config.target_class >= detector.class_count()) {
    throw std::invalid_argument("attack: target class " + std::to_string(config.target_class) +
                                " but the detector has " +
                                std::to_string(detector.class_count()) + " classes");
  }
  if (generator.latent_dim() < 2) throw std::invalid_argument("attack: latent_dim must be >= 2");
  const Shape& bs = background.shape();
  if (bs.size() != 3 || bs[0] != 3) {
    throw std::invalid_argument("attack: background must be [3,H,W], got " + shape_str(bs));
  }
  const Shape frame = config.placement.compose_after_resize
                          ? Shape{3, config.placement.frame_h, config.placement.frame_w}
                          : bs;
  if (frame != detector.input_shape()) {
    throw std::invalid_argument("attack: composite frame " + shape_str(frame) +
                                " does not match detector input " +
                                shape_str(detector.input_shape()));
  }
  // Worst-case footprint under the transform distribution.
  const Shape& ps = generator.patch_shape();
  const auto& d = config.transform_dist;
  const double smax = config.eot_enabled ? d.scale.hi : 1.0;
  auto fits = [&](double pos, double shift_lo, double shift_hi, std::size_t n, std::size_t limit) {
    const double grow = (std::round(smax * n) - static_cast<double>(n)) / 2.0;
    return pos + shift_lo - grow >= 0.0 &&
           pos + shift_hi - grow + std::round(smax * n) <= static_cast<double>(limit);
  };
  const bool eot = config.eot_enabled;
  if (!fits(config.placement.x, eot ? d.dx.lo : 0.0, eot ? d.dx.hi : 0.0, ps[2], frame[2]) ||
      !fits(config.placement.y, eot ? d.dy.lo : 0.0, eot ? d.dy.hi : 0.0, ps[1], frame[1])) {
    throw std::invalid_argument("attack: patch " + shape_str(ps) + " at (" +
                                std::to_string(config.placement.x) + ", " +
                                std::to_string(config.placement.y) +
                                ") can leave the frame under the transform ranges");
  }
}

AttackResult run_attack(const Generator& generator, const Detector& detector,
                        const Tensor& background, const AttackConfig& config) {
  check_attack_inputs(generator, detector, background, config);
  Rng latent_rng(derive_seed(config.seed, "latent"));
  Rng eot_rng(derive_seed(config.seed, "eot"));

  AttackResult r;
  r.config = config;
  r.z = init_latent(generator.latent_dim(), latent_rng);
  AdamState adam(r.z.shape());
  StreakCounter streak(config.success_threshold, config.streak_length);
  for (std::size_t it = 0; it < config.max_iters; ++it) {
    Tape tape;
    const Var z = tape.leaf(r.z);
    const AttackLoss loss = total_loss(tape, z, generator, detector, background, config, eot_rng);
    const Tensor grad = tape.backward(loss.total)[z];
    adam_update(r.z, grad, adam, config.learning_rate);

    const double conf = patch_confidence(generator, detector, background, r.z, config);
    r.trace.push_back({conf, loss.l0.value().item(), loss.l1.value().item(),
                       loss.total.value().item()});
    r.iterations = it + 1;
    if (streak.observe(conf)) {
      r.success = true;
      break;
    }
  }
  r.patch = generator.generate(r.z);
  r.composite = compose_patch(generator, background, r.z, config.placement);
  std::tie(r.mu_hat, r.sigma_hat) = estimate_latent_stats(r.z);
  r.final_kl = loss_kl(r.mu_hat, r.sigma_hat);
  r.final_confidence = r.trace.empty() ? 0.0 : r.trace.back().max_confidence;
  return r;
}

nlohmann::json AttackResult::to_json() const {
  nlohmann::json conf = nlohmann::json::array(), l0 = nlohmann::json::array(),
                 l1 = nlohmann::json::array(), total = nlohmann::json::array();
  for (const auto& t : trace) {
    conf.push_back(t.max_confidence);
    l0.push_back(t.l0);
    l1.push_back(t.l1);
    total.push_back(t.total);
  }
  return {{"success", success},
          {"iterations", iterations},
          {"final_confidence", final_confidence},
          {"mu_hat", mu_hat},
          {"sigma_hat", sigma_hat},
          {"final_kl", final_kl},
          {"z", z.values()},
          {"config", advobj::to_json(config)},
          {"trace", {{"max_confidence", conf}, {"l0", l0}, {"l1", l1}, {"total", total}}}};
}

}  // namespace advobj
