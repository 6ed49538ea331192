#pragma once

#include <string>
#include <vector>

#include "advobj/network.hpp"

namespace advobj {

/// Axis-aligned box in input-pixel units, top-left origin.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  bool intersects(const Box& o) const {
    return x < o.x + o.w && o.x < x + w && y < o.y + o.h && o.y < y + h;
  }
  friend bool operator==(const Box&, const Box&) = default;
};

double iou(const Box& a, const Box& b);

/// Differentiable map from a latent vector to an image patch [3,h,w] in [0,1].
class Generator {
 public:
  Generator() = default;
  /// The network must take [latent_dim] and end in a sigmoid over [3,h,w].
  explicit Generator(Network network);

  std::size_t latent_dim() const { return latent_dim_; }
  const Shape& patch_shape() const { return patch_shape_; }
  const Network& network() const { return network_; }

  Var generate(Tape& tape, const Var& z) const;
  Tensor generate(const Tensor& z) const;

 private:
  Network network_;
  std::size_t latent_dim_ = 0;
  Shape patch_shape_;
};

struct AnchorSpec {
  std::size_t stride = 16;
  std::vector<double> sizes{24.0, 40.0};
};

struct ProposalScore {
  Box box;
  std::vector<double> logits;
  std::vector<double> probs;
};

/// Single-stage detector. The network maps an image to a
/// [A*(K+1), H/stride, W/stride] grid of logits; each grid cell carries one
/// square anchor per configured size. Class 0 is background.
class Detector {
 public:
  struct Output {
    Var logits;  // [n, K+1]
    Var probs;   // [n, K+1]
  };

  Detector() = default;
  Detector(Network network, AnchorSpec anchors, std::vector<std::string> class_names);

  const Shape& input_shape() const { return network_.spec().input_shape; }
  const AnchorSpec& anchors() const { return anchors_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  std::size_t class_count() const { return class_names_.size(); }
  const Network& network() const { return network_; }

  std::size_t proposal_count() const { return boxes_.size(); }
  const std::vector<Box>& proposal_boxes() const { return boxes_; }

  Output forward(Tape& tape, const Var& image) const;
  std::vector<ProposalScore> detect(const Tensor& image) const;
  /// Max over proposals of the probability of `target_class`.
  double max_class_prob(const Tensor& image, std::size_t target_class) const;
  std::size_t class_index(const std::string& name) const;

 private:
  Network network_;
  AnchorSpec anchors_;
  std::vector<std::string> class_names_;
  std::size_t grid_h_ = 0;
  std::size_t grid_w_ = 0;
  std::vector<Box> boxes_;
};

/// Anchor boxes for an input of the given size, clipped to the image, in
/// proposal order (row-major grid cell, then anchor size).
std::vector<Box> anchor_boxes(std::size_t height, std::size_t width, const AnchorSpec& anchors);

/// Bilinear crop of `box` from a [C,H,W] image resampled to out_h x out_w.
/// Throws std::out_of_range if the box leaves the image.
Var crop_proposal(const Var& image, const Box& box, std::size_t out_h, std::size_t out_w);

NetworkSpec reference_generator_spec(std::size_t latent_dim = 32);
/// Encoder used to train the reference generator: [3,32,32] -> [2*latent_dim]
/// holding the posterior mean followed by the log-variance.
NetworkSpec reference_encoder_spec(std::size_t latent_dim = 32);
NetworkSpec reference_detector_spec(std::size_t classes_with_background = 4,
                                    std::size_t anchors_per_cell = 2);
std::vector<std::string> reference_class_names();

}  // namespace advobj
