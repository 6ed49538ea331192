#include "advobj/models.hpp"

#include <algorithm>
#include <stdexcept>

namespace advobj {

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

Generator::Generator(Network network) : network_(std::move(network)) {
  const auto& spec = network_.spec();
  if (spec.input_shape.size() != 1) {
    throw ShapeError("generator: latent input must be rank 1, got " +
                     shape_str(spec.input_shape));
  }
  latent_dim_ = spec.input_shape[0];
  patch_shape_ = network_.output_shape();
  if (patch_shape_.size() != 3 || patch_shape_[0] != 3) {
    throw ShapeError("generator: output must be [3,h,w], got " + shape_str(patch_shape_));
  }
  if (spec.layers.empty() || spec.layers.back().activation != Activation::kSigmoid) {
    throw std::invalid_argument("generator: final layer must use a sigmoid");
  }
}

Var Generator::generate(Tape& tape, const Var& z) const {
  if (z.shape() != Shape{latent_dim_}) {
    throw ShapeError("generate: latent vector of shape " + shape_str(z.shape()) +
                     ", expected [" + std::to_string(latent_dim_) + "]");
  }
  return network_.forward(tape, z);
}

Tensor Generator::generate(const Tensor& z) const {
  Tape tape;
  return generate(tape, tape.constant(z)).value();
}

// ---------------------------------------------------------------------------
// Detector
// ---------------------------------------------------------------------------

std::vector<Box> anchor_boxes(std::size_t height, std::size_t width, const AnchorSpec& anchors) {
  std::vector<Box> boxes;
  const std::size_t gh = height / anchors.stride;
  const std::size_t gw = width / anchors.stride;
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const double cx = (static_cast<double>(gx) + 0.5) * static_cast<double>(anchors.stride);
      const double cy = (static_cast<double>(gy) + 0.5) * static_cast<double>(anchors.stride);
      for (double s : anchors.sizes) {
        const double x0 = std::max(0.0, cx - s / 2), x1 = std::min(W, cx + s / 2);
        const double y0 = std::max(0.0, cy - s / 2), y1 = std::min(H, cy + s / 2);
        boxes.push_back({x0, y0, x1 - x0, y1 - y0});
      }
    }
  }
  return boxes;
}

Detector::Detector(Network network, AnchorSpec anchors, std::vector<std::string> class_names)
    : network_(std::move(network)),
      anchors_(std::move(anchors)),
      class_names_(std::move(class_names)) {
  const Shape& in = network_.spec().input_shape;
  if (in.size() != 3 || in[0] != 3) {
    throw ShapeError("detector: input must be [3,H,W], got " + shape_str(in));
  }
  if (class_names_.size() < 2) throw std::invalid_argument("detector: need background + 1 class");
  if (anchors_.stride == 0 || anchors_.sizes.empty()) {
    throw std::invalid_argument("detector: empty anchor spec");
  }
  grid_h_ = in[1] / anchors_.stride;
  grid_w_ = in[2] / anchors_.stride;
  const Shape expected{anchors_.sizes.size() * class_names_.size(), grid_h_, grid_w_};
  if (network_.output_shape() != expected) {
    throw ShapeError("detector: head output " + shape_str(network_.output_shape()) +
                     " does not match anchor grid " + shape_str(expected));
  }
  boxes_ = anchor_boxes(in[1], in[2], anchors_);
}

Detector::Output Detector::forward(Tape& tape, const Var& image) const {
  if (image.shape() != input_shape()) {
    throw ShapeError("detect: image shape " + shape_str(image.shape()) + " does not match " +
                     shape_str(input_shape()));
  }
  const std::size_t a = anchors_.sizes.size();
  const std::size_t k = class_names_.size();
  Var head = network_.forward(tape, image);
  head = reshape(head, {a * k, grid_h_ * grid_w_});
  Var logits = reshape(transpose(head), {grid_h_ * grid_w_ * a, k});
  return {logits, softmax_rows(logits)};
}

std::vector<ProposalScore> Detector::detect(const Tensor& image) const {
  Tape tape;
  const Output out = forward(tape, tape.constant(image));
  const std::size_t k = class_names_.size();
  std::vector<ProposalScore> scores(boxes_.size());
  for (std::size_t i = 0; i < boxes_.size(); ++i) {
    scores[i].box = boxes_[i];
    const auto l = out.logits.value().data().subspan(i * k, k);
    const auto p = out.probs.value().data().subspan(i * k, k);
    scores[i].logits.assign(l.begin(), l.end());
    scores[i].probs.assign(p.begin(), p.end());
  }
  return scores;
}

double Detector::max_class_prob(const Tensor& image, std::size_t target_class) const {
  if (target_class == 0 || target_class >= class_names_.size()) {
    throw std::out_of_range("detector: target class " + std::to_string(target_class) +
                            " is not a foreground class");
  }
  Tape tape;
  const Output out = forward(tape, tape.constant(image));
  const std::size_t k = class_names_.size();
  const Tensor& p = out.probs.value();
  double best = 0.0;
  for (std::size_t i = 0; i < boxes_.size(); ++i) best = std::max(best, p[i * k + target_class]);
  return best;
}

std::size_t Detector::class_index(const std::string& name) const {
  for (std::size_t i = 0; i < class_names_.size(); ++i) {
    if (class_names_[i] == name) return i;
  }
  throw std::invalid_argument("detector: unknown class '" + name + "'");
}

Var crop_proposal(const Var& image, const Box& box, std::size_t out_h, std::size_t out_w) {
  return crop_resize(image, box.x, box.y, box.w, box.h, out_h, out_w);
}

// ---------------------------------------------------------------------------
// Reference architectures
// ---------------------------------------------------------------------------

NetworkSpec reference_generator_spec(std::size_t latent_dim) {
  NetworkSpec spec;
  spec.input_shape = {latent_dim};
  spec.layers = {
      LayerSpec::affine(latent_dim, 128, Activation::kTanh),
      LayerSpec::affine(128, 16 * 8 * 8, Activation::kTanh),
      LayerSpec::reshape({16, 8, 8}),
      LayerSpec::upsample(2),
      LayerSpec::conv(16, 16, 3, 1, 1, Activation::kTanh),
      LayerSpec::upsample(2),
      LayerSpec::conv(16, 3, 3, 1, 1, Activation::kSigmoid),
  };
  return spec;
}

NetworkSpec reference_encoder_spec(std::size_t latent_dim) {
  NetworkSpec spec;
  spec.input_shape = {3, 32, 32};
  spec.layers = {
      LayerSpec::conv(3, 16, 3, 2, 1, Activation::kTanh),
      LayerSpec::conv(16, 32, 3, 2, 1, Activation::kTanh),
      LayerSpec::affine(32 * 8 * 8, 2 * latent_dim, Activation::kNone),
  };
  return spec;
}

NetworkSpec reference_detector_spec(std::size_t classes_with_background,
                                    std::size_t anchors_per_cell) {
  NetworkSpec spec;
  spec.input_shape = {3, 128, 128};
  spec.layers = {
      LayerSpec::conv(3, 8, 3, 2, 1, Activation::kTanh),
      LayerSpec::conv(8, 16, 3, 2, 1, Activation::kTanh),
      LayerSpec::conv(16, 24, 3, 2, 1, Activation::kTanh),
      LayerSpec::conv(24, 32, 3, 2, 1, Activation::kTanh),
      LayerSpec::conv(32, 32, 3, 1, 1, Activation::kTanh),
      LayerSpec::conv(32, anchors_per_cell * classes_with_background, 1, 1, 0,
                      Activation::kNone),
  };
  return spec;
}

std::vector<std::string> reference_class_names() {
  return {"background", "prohibitory", "mandatory", "danger"};
}

}  // namespace advobj
