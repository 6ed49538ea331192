#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "advobj/autodiff.hpp"
#include "advobj/rng.hpp"

namespace advobj {

enum class Activation { kNone, kRelu, kTanh, kSigmoid };

enum class LayerType {
  kAffine,    // flatten -> W x + b
  kConv,      // conv2d with bias
  kUpsample,  // bilinear resize by an integer factor
  kReshape,
};

struct LayerSpec {
  LayerType type = LayerType::kAffine;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t factor = 1;
  Shape shape;
  Activation activation = Activation::kNone;

  static LayerSpec affine(std::size_t in, std::size_t out, Activation act);
  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                        std::size_t pad, Activation act);
  static LayerSpec upsample(std::size_t factor);
  static LayerSpec reshape(Shape shape);
};

struct NetworkSpec {
  Shape input_shape;
  std::vector<LayerSpec> layers;
};

nlohmann::json to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const nlohmann::json& j);

/// A feed-forward stack of layers with immutable weights. Parameters are
/// ordered layer by layer, weight before bias.
class Network {
 public:
  Network() = default;
  Network(NetworkSpec spec, std::vector<Tensor> params);

  /// Fresh network with scaled-uniform initial weights.
  static Network initialized(NetworkSpec spec, Rng& rng);

  /// Shapes of every parameter tensor implied by `spec`. Throws if the
  /// layer chain is inconsistent.
  static std::vector<Shape> param_shapes(const NetworkSpec& spec);
  static Shape output_shape(const NetworkSpec& spec);

  /// Forward pass using the stored weights as tape constants.
  Var forward(Tape& tape, const Var& input) const;
  /// Forward pass with caller-supplied parameter nodes (training).
  Var forward(const Var& input, std::span<const Var> params) const;

  const NetworkSpec& spec() const { return spec_; }
  std::size_t param_count() const { return params_.size(); }
  const Tensor& param(std::size_t i) const { return *params_.at(i); }
  std::vector<Tensor> params() const;
  Shape output_shape() const { return output_shape(spec_); }

 private:
  NetworkSpec spec_;
  std::vector<std::shared_ptr<const Tensor>> params_;
};

}  // namespace advobj
