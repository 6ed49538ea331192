#include "advobj/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "advobj/adam.hpp"
#include "advobj/bundle.hpp"
#include "advobj/rng.hpp"

namespace advobj {

namespace {

// Adam over a list of parameter tensors with per-batch gradient sums.
class ParamOptimizer {
 public:
  explicit ParamOptimizer(std::vector<Tensor> params) : params_(std::move(params)) {
    for (const auto& p : params_) {
      states_.emplace_back(p.shape());
      grads_.emplace_back(p.shape());
    }
  }

  std::vector<Var> leaves(Tape& tape) const {
    std::vector<Var> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(tape.leaf(p));
    return out;
  }

  void accumulate(const Gradients& g, const std::vector<Var>& leaves) {
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      const Tensor& gi = g[leaves[i]];
      for (std::size_t k = 0; k < gi.size(); ++k) grads_[i][k] += gi[k];
    }
  }

  void step(double lr, double scale) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      for (double& v : grads_[i].data()) v *= scale;
      adam_update(params_[i], grads_[i], states_[i], lr);
      grads_[i].fill(0.0);
    }
  }

  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamState> states_;
  std::vector<Tensor> grads_;
};

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

struct AnchorTargets {
  std::vector<std::size_t> positive_index;  // flat index into [n, K+1]
  std::vector<std::size_t> negative_index;
};

AnchorTargets assign_targets(const std::vector<Box>& boxes, const std::vector<Annotation>& anns,
                             std::size_t classes, double pos_iou, double neg_iou) {
  std::vector<int> label(boxes.size(), 0);  // -1 ignore, 0 background, >0 class
  for (std::size_t a = 0; a < boxes.size(); ++a) {
    double best = 0.0;
    std::size_t best_class = 0;
    for (const auto& ann : anns) {
      const double v = iou(boxes[a], ann.box);
      if (v > best) {
        best = v;
        best_class = ann.class_id;
      }
    }
    if (best >= pos_iou) {
      label[a] = static_cast<int>(best_class);
    } else if (best >= neg_iou) {
      label[a] = -1;
    }
  }
  for (const auto& ann : anns) {
    std::size_t best_a = 0;
    double best = -1.0;
    for (std::size_t a = 0; a < boxes.size(); ++a) {
      const double v = iou(boxes[a], ann.box);
      if (v > best) {
        best = v;
        best_a = a;
      }
    }
    label[best_a] = static_cast<int>(ann.class_id);
  }
  AnchorTargets t;
  for (std::size_t a = 0; a < boxes.size(); ++a) {
    if (label[a] > 0) t.positive_index.push_back(a * classes + static_cast<std::size_t>(label[a]));
    if (label[a] == 0) t.negative_index.push_back(a * classes);
  }
  return t;
}

// Mean cross-entropy over the selected (anchor, class) probabilities.
Var mean_cross_entropy(const Var& flat_probs, const std::vector<std::size_t>& index) {
  Var picked = gather(flat_probs, index);
  return scalar_scale(sum(log(clamp_min(picked, 1e-12))), -1.0 / static_cast<double>(index.size()));
}

std::vector<Tensor> render_patches(const PatchSpec& spec, std::size_t n, std::uint64_t seed) {
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(render_patch(spec, seed + i));
  return out;
}

}  // namespace

nlohmann::json DetectorMetrics::to_json() const {
  return {{"sign_scenes", sign_scenes},   {"free_scenes", free_scenes},
          {"detected_rate", detected_rate}, {"clear_rate", clear_rate},
          {"gray_max_prob", gray_max_prob}, {"final_loss", final_loss},
          {"targets_met", targets_met}};
}

nlohmann::json GeneratorMetrics::to_json() const {
  return {{"heldout_mse", heldout_mse},
          {"channel_variance", channel_variance},
          {"final_loss", final_loss},
          {"targets_met", targets_met}};
}

std::vector<SyntheticScene> heldout_scenes(const DetectorTrainConfig& config) {
  const std::uint64_t base = derive_seed(config.seed, "heldout");
  std::vector<SyntheticScene> out;
  for (std::size_t i = 0; i < config.heldout_scenes; ++i) {
    out.push_back(render_scene(config.scenes, base + i));
  }
  return out;
}

DetectorMetrics evaluate_detector(const Detector& detector,
                                  const std::vector<SyntheticScene>& heldout,
                                  const DetectorTrainConfig& config) {
  DetectorMetrics m;
  const std::size_t k = detector.class_count();
  std::size_t detected = 0, clear = 0;
  for (const auto& scene : heldout) {
    const auto scores = detector.detect(scene.image);
    if (scene.annotations.empty()) {
      ++m.free_scenes;
      double worst = 0.0;
      for (const auto& s : scores)
        for (std::size_t c = 1; c < k; ++c) worst = std::max(worst, s.probs[c]);
      if (worst < config.clear_prob) ++clear;
    } else {
      ++m.sign_scenes;
      bool all_found = true;
      for (const auto& ann : scene.annotations) {
        bool found = false;
        for (const auto& s : scores) {
          if (iou(s.box, ann.box) >= 0.3 && s.probs[ann.class_id] > config.detect_prob) {
            found = true;
            break;
          }
        }
        all_found = all_found && found;
      }
      if (all_found) ++detected;
    }
  }
  m.detected_rate = m.sign_scenes ? static_cast<double>(detected) / m.sign_scenes : 1.0;
  m.clear_rate = m.free_scenes ? static_cast<double>(clear) / m.free_scenes : 1.0;
  const Tensor gray(detector.input_shape(), 0.5);
  for (std::size_t c = 1; c < k; ++c) {
    m.gray_max_prob = std::max(m.gray_max_prob, detector.max_class_prob(gray, c));
  }
  m.targets_met = m.detected_rate >= config.required_rate &&
                  m.clear_rate >= config.required_rate && m.gray_max_prob < config.clear_prob;
  return m;
}

TrainedDetector train_detector(const DetectorTrainConfig& config,
                               const std::vector<SyntheticScene>* train_set,
                               const std::vector<SyntheticScene>* heldout) {
  const auto names = class_names(config.scenes);
  const std::size_t k = names.size();
  AnchorSpec anchors;
  NetworkSpec spec = reference_detector_spec(k, anchors.sizes.size());
  spec.input_shape = {3, config.scenes.height, config.scenes.width};
  const auto boxes = anchor_boxes(spec.input_shape[1], spec.input_shape[2], anchors);

  Rng rng(derive_seed(config.seed, "detector-init"));
  Network init = Network::initialized(spec, rng);
  // Start the background logit high so early training is not flooded by
  // foreground false positives.
  std::vector<Tensor> params = init.params();
  Tensor& head_bias = params.back();
  for (std::size_t a = 0; a < anchors.sizes.size(); ++a) head_bias[a * k] = 2.0;
  ParamOptimizer opt(std::move(params));

  // Without an explicit set, each epoch sees freshly rendered scenes.
  const bool stream = train_set == nullptr;
  std::vector<SyntheticScene> rendered;
  const std::uint64_t base = derive_seed(config.seed, "train");
  const std::size_t n = stream ? config.train_scenes : train_set->size();

  Rng order_rng(derive_seed(config.seed, "detector-order"));
  double last_epoch_loss = 0.0;
  const std::size_t batch = std::max<std::size_t>(1, config.batch_size);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (stream) {
      rendered.clear();
      for (std::size_t i = 0; i < n; ++i) {
        rendered.push_back(render_scene(config.scenes, base + epoch * n + i));
      }
    }
    const auto& scenes = stream ? rendered : *train_set;
    const double lr = epoch >= config.epochs * 3 / 4 ? config.learning_rate * config.final_lr_scale
                                                     : config.learning_rate;
    const auto order = shuffled(n, order_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      for (std::size_t s = start; s < end; ++s) {
        const auto& scene = scenes[order[s]];
        const auto t = assign_targets(boxes, scene.annotations, k, config.positive_iou,
                                      config.negative_iou);
        Tape tape;
        const auto leaves = opt.leaves(tape);
        const Network net(spec, opt.params());
        Var head = net.forward(tape.constant(scene.image), leaves);
        const std::size_t a = anchors.sizes.size();
        head = reshape(head, {a * k, head.shape()[1] * head.shape()[2]});
        Var probs = reshape(softmax_rows(reshape(transpose(head), {boxes.size(), k})),
                            {boxes.size() * k});
        Var loss = mean_cross_entropy(probs, t.negative_index);
        if (config.hard_negatives > 0 && !t.negative_index.empty()) {
          auto hard = t.negative_index;
          const std::size_t h = std::min(config.hard_negatives, hard.size());
          const Tensor& pv = probs.value();
          std::partial_sort(hard.begin(), hard.begin() + static_cast<std::ptrdiff_t>(h), hard.end(),
                            [&](std::size_t a, std::size_t b) {
                              return pv[a] < pv[b] || (pv[a] == pv[b] && a < b);
                            });
          hard.resize(h);
          loss = add(loss, mean_cross_entropy(probs, hard));
        }
        if (!t.positive_index.empty()) loss = add(loss, mean_cross_entropy(probs, t.positive_index));
        epoch_loss += loss.value().item();
        opt.accumulate(tape.backward(loss), leaves);
      }
      opt.step(lr, 1.0 / static_cast<double>(end - start));
    }
    last_epoch_loss = order.empty() ? 0.0 : epoch_loss / static_cast<double>(order.size());
  }

  Network trained(spec, opt.params());
  TrainedDetector result{Detector(quantize_to_float32(trained), anchors, names), {}};
  result.metrics = heldout ? evaluate_detector(result.detector, *heldout, config)
                           : evaluate_detector(result.detector, heldout_scenes(config), config);
  result.metrics.final_loss = last_epoch_loss;
  if (config.require_targets && !result.metrics.targets_met) {
    throw TrainingTargetError("train_detector: targets not met", result.metrics.to_json());
  }
  return result;
}

std::array<double, 3> sample_channel_variance(const Generator& generator, std::size_t samples,
                                              std::uint64_t seed) {
  Rng rng(seed);
  const Shape& ps = generator.patch_shape();
  const std::size_t plane = ps[1] * ps[2];
  Tensor sum(ps), sum_sq(ps);
  for (std::size_t s = 0; s < samples; ++s) {
    Tensor z({generator.latent_dim()});
    for (double& v : z.data()) v = rng.normal();
    const Tensor patch = generator.generate(z);
    for (std::size_t i = 0; i < patch.size(); ++i) {
      sum[i] += patch[i];
      sum_sq[i] += patch[i] * patch[i];
    }
  }
  std::array<double, 3> out{};
  const double n = static_cast<double>(samples);
  for (std::size_t c = 0; c < 3; ++c) {
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      const double mean = sum[c * plane + p] / n;
      acc += sum_sq[c * plane + p] / n - mean * mean;
    }
    out[c] = acc / static_cast<double>(plane);
  }
  return out;
}

TrainedGenerator train_generator(const GeneratorTrainConfig& config,
                                 const std::vector<Tensor>* train_set) {
  std::vector<Tensor> rendered;
  if (!train_set) {
    rendered = render_patches(config.patches, config.train_patches,
                              derive_seed(config.seed, "train"));
    train_set = &rendered;
  }
  const std::size_t d = config.latent_dim;
  NetworkSpec dec_spec = reference_generator_spec(d);
  NetworkSpec enc_spec = reference_encoder_spec(d);
  if (config.patches.size != 32) {
    throw std::invalid_argument("train_generator: the reference architecture needs 32x32 patches");
  }

  Rng init_rng(derive_seed(config.seed, "generator-init"));
  std::vector<Tensor> params = Network::initialized(enc_spec, init_rng).params();
  const std::size_t enc_count = params.size();
  for (auto& p : Network::initialized(dec_spec, init_rng).params()) params.push_back(std::move(p));
  ParamOptimizer opt(std::move(params));

  std::vector<std::size_t> mu_idx(d), logvar_idx(d);
  std::iota(mu_idx.begin(), mu_idx.end(), 0);
  std::iota(logvar_idx.begin(), logvar_idx.end(), d);
  const double recon_weight = 1.0 / (2.0 * config.recon_variance);

  Rng order_rng(derive_seed(config.seed, "generator-order"));
  Rng noise_rng(derive_seed(config.seed, "generator-noise"));
  double last_epoch_loss = 0.0;
  const std::size_t batch = std::max<std::size_t>(1, config.batch_size);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled(train_set->size(), order_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      for (std::size_t s = start; s < end; ++s) {
        const Tensor& x = (*train_set)[order[s]];
        Tape tape;
        const auto leaves = opt.leaves(tape);
        const std::span<const Var> enc_params(leaves.data(), enc_count);
        const std::span<const Var> dec_params(leaves.data() + enc_count, leaves.size() - enc_count);
        const Network encoder(enc_spec, std::vector<Tensor>(opt.params().begin(),
                                                            opt.params().begin() + enc_count));
        const Network decoder(dec_spec, std::vector<Tensor>(opt.params().begin() + enc_count,
                                                            opt.params().end()));
        const Var input = tape.constant(x);
        const Var stats = encoder.forward(input, enc_params);
        const Var mu = gather(stats, mu_idx);
        const Var logvar = gather(stats, logvar_idx);
        Tensor eps({d});
        for (double& v : eps.data()) v = noise_rng.normal();
        const Var z = add(mu, mul(exp(scalar_scale(logvar, 0.5)), tape.constant(std::move(eps))));
        const Var recon = decoder.forward(z, dec_params);
        const Var diff = sub(recon, input);
        const Var recon_loss = scalar_scale(sum(mul(diff, diff)), recon_weight);
        // 0.5 * sum(mu^2 + exp(logvar) - logvar - 1)
        const Var kl = scalar_scale(
            sum(add_scalar(sub(add(mul(mu, mu), exp(logvar)), logvar), -1.0)), 0.5);
        const Var loss = add(recon_loss, kl);
        epoch_loss += loss.value().item();
        opt.accumulate(tape.backward(loss), leaves);
      }
      opt.step(config.learning_rate, 1.0 / static_cast<double>(end - start));
    }
    last_epoch_loss = order.empty() ? 0.0 : epoch_loss / static_cast<double>(order.size());
  }

  const Network encoder(enc_spec, std::vector<Tensor>(opt.params().begin(),
                                                      opt.params().begin() + enc_count));
  const Network decoder = quantize_to_float32(
      Network(dec_spec, std::vector<Tensor>(opt.params().begin() + enc_count, opt.params().end())));
  TrainedGenerator result{Generator(decoder), {}};

  const auto heldout = render_patches(config.patches, config.heldout_patches,
                                      derive_seed(config.seed, "heldout"));
  double se = 0.0;
  std::size_t count = 0;
  for (const auto& x : heldout) {
    Tape tape;
    const Var stats = encoder.forward(tape, tape.constant(x));
    const Var recon = decoder.forward(tape, gather(stats, mu_idx));
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = recon.value()[i] - x[i];
      se += e * e;
    }
    count += x.size();
  }
  GeneratorMetrics& m = result.metrics;
  m.heldout_mse = count ? se / static_cast<double>(count) : 0.0;
  m.channel_variance = sample_channel_variance(result.generator, 64,
                                               derive_seed(config.seed, "variance"));
  m.final_loss = last_epoch_loss;
  m.targets_met = m.heldout_mse <= config.max_heldout_mse &&
                  std::all_of(m.channel_variance.begin(), m.channel_variance.end(),
                              [&](double v) { return v >= config.min_channel_variance; });
  if (config.require_targets && !m.targets_met) {
    throw TrainingTargetError("train_generator: targets not met", m.to_json());
  }
  return result;
}

}  // namespace advobj
