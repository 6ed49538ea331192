#include "advobj/network.hpp"

#include <cmath>
#include <stdexcept>

namespace advobj {

namespace {

const char* layer_type_name(LayerType t) {
  switch (t) {
    case LayerType::kAffine: return "affine";
    case LayerType::kConv: return "conv";
    case LayerType::kUpsample: return "upsample";
    case LayerType::kReshape: return "reshape";
  }
  return "?";
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kNone: return "none";
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kSigmoid: return "sigmoid";
  }
  return "?";
}

LayerType parse_layer_type(const std::string& s) {
  if (s == "affine") return LayerType::kAffine;
  if (s == "conv") return LayerType::kConv;
  if (s == "upsample") return LayerType::kUpsample;
  if (s == "reshape") return LayerType::kReshape;
  throw std::invalid_argument("network: unknown layer type '" + s + "'");
}

Activation parse_activation(const std::string& s) {
  if (s == "none") return Activation::kNone;
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  if (s == "sigmoid") return Activation::kSigmoid;
  throw std::invalid_argument("network: unknown activation '" + s + "'");
}

Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::kNone: return x;
    case Activation::kRelu: return relu(x);
    case Activation::kTanh: return tanh(x);
    case Activation::kSigmoid: return sigmoid(x);
  }
  return x;
}

// Walks the layer chain, returning the shape after each layer.
std::vector<Shape> trace_shapes(const NetworkSpec& spec) {
  std::vector<Shape> shapes;
  Shape cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string where = "network layer " + std::to_string(i) + " (" +
                              layer_type_name(l.type) + "): ";
    switch (l.type) {
      case LayerType::kAffine:
        if (shape_numel(cur) != l.in) {
          throw ShapeError(where + "expects " + std::to_string(l.in) + " inputs, got " +
                           shape_str(cur));
        }
        cur = {l.out};
        break;
      case LayerType::kConv:
        if (cur.size() != 3 || cur[0] != l.in || l.stride == 0 ||
            cur[1] + 2 * l.pad < l.kernel || cur[2] + 2 * l.pad < l.kernel) {
          throw ShapeError(where + "incompatible input " + shape_str(cur));
        }
        cur = {l.out, (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1,
               (cur[2] + 2 * l.pad - l.kernel) / l.stride + 1};
        break;
      case LayerType::kUpsample:
        if (cur.size() != 3 || l.factor == 0) throw ShapeError(where + "needs [C,H,W] input");
        cur = {cur[0], cur[1] * l.factor, cur[2] * l.factor};
        break;
      case LayerType::kReshape:
        if (shape_numel(cur) != shape_numel(l.shape)) {
          throw ShapeError(where + "cannot reshape " + shape_str(cur) + " to " +
                           shape_str(l.shape));
        }
        cur = l.shape;
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

}  // namespace

LayerSpec LayerSpec::affine(std::size_t in, std::size_t out, Activation act) {
  LayerSpec l;
  l.type = LayerType::kAffine;
  l.in = in;
  l.out = out;
  l.activation = act;
  return l;
}

LayerSpec LayerSpec::conv(std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t stride, std::size_t pad, Activation act) {
  LayerSpec l;
  l.type = LayerType::kConv;
  l.in = in;
  l.out = out;
  l.kernel = kernel;
  l.stride = stride;
  l.pad = pad;
  l.activation = act;
  return l;
}

LayerSpec LayerSpec::upsample(std::size_t factor) {
  LayerSpec l;
  l.type = LayerType::kUpsample;
  l.factor = factor;
  return l;
}

LayerSpec LayerSpec::reshape(Shape shape) {
  LayerSpec l;
  l.type = LayerType::kReshape;
  l.shape = std::move(shape);
  return l;
}

nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json j{{"type", layer_type_name(l.type)}};
    switch (l.type) {
      case LayerType::kAffine:
        j["in"] = l.in;
        j["out"] = l.out;
        j["activation"] = activation_name(l.activation);
        break;
      case LayerType::kConv:
        j["in"] = l.in;
        j["out"] = l.out;
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        j["pad"] = l.pad;
        j["activation"] = activation_name(l.activation);
        break;
      case LayerType::kUpsample: j["factor"] = l.factor; break;
      case LayerType::kReshape: j["shape"] = l.shape; break;
    }
    layers.push_back(std::move(j));
  }
  return {{"input_shape", spec.input_shape}, {"layers", std::move(layers)}};
}

NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  spec.input_shape = j.at("input_shape").get<Shape>();
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.type = parse_layer_type(lj.at("type").get<std::string>());
    switch (l.type) {
      case LayerType::kAffine:
        l.in = lj.at("in");
        l.out = lj.at("out");
        l.activation = parse_activation(lj.at("activation"));
        break;
      case LayerType::kConv:
        l.in = lj.at("in");
        l.out = lj.at("out");
        l.kernel = lj.at("kernel");
        l.stride = lj.at("stride");
        l.pad = lj.at("pad");
        l.activation = parse_activation(lj.at("activation"));
        break;
      case LayerType::kUpsample: l.factor = lj.at("factor"); break;
      case LayerType::kReshape: l.shape = lj.at("shape").get<Shape>(); break;
    }
    spec.layers.push_back(std::move(l));
  }
  trace_shapes(spec);
  return spec;
}

std::vector<Shape> Network::param_shapes(const NetworkSpec& spec) {
  trace_shapes(spec);
  std::vector<Shape> shapes;
  for (const auto& l : spec.layers) {
    if (l.type == LayerType::kAffine) {
      shapes.push_back({l.out, l.in});
      shapes.push_back({l.out});
    } else if (l.type == LayerType::kConv) {
      shapes.push_back({l.out, l.in, l.kernel, l.kernel});
      shapes.push_back({l.out});
    }
  }
  return shapes;
}

Shape Network::output_shape(const NetworkSpec& spec) {
  const auto shapes = trace_shapes(spec);
  return shapes.empty() ? spec.input_shape : shapes.back();
}

Network::Network(NetworkSpec spec, std::vector<Tensor> params) : spec_(std::move(spec)) {
  const auto shapes = param_shapes(spec_);
  if (shapes.size() != params.size()) {
    throw ShapeError("network: expected " + std::to_string(shapes.size()) +
                     " parameter tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (params[i].shape() != shapes[i]) {
      throw ShapeError("network: parameter " + std::to_string(i) + " has shape " +
                       shape_str(params[i].shape()) + ", expected " + shape_str(shapes[i]));
    }
    params_.push_back(std::make_shared<const Tensor>(std::move(params[i])));
  }
}

Network Network::initialized(NetworkSpec spec, Rng& rng) {
  std::vector<Tensor> params;
  for (const auto& shape : param_shapes(spec)) {
    Tensor t(shape);
    if (shape.size() > 1) {
      const std::size_t fan_in = shape_numel(shape) / shape[0];
      const double limit = std::sqrt(3.0 / static_cast<double>(fan_in));
      for (double& v : t.data()) v = rng.uniform(-limit, limit);
    }
    params.push_back(std::move(t));
  }
  return Network(std::move(spec), std::move(params));
}

std::vector<Tensor> Network::params() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(*p);
  return out;
}

Var Network::forward(Tape& tape, const Var& input) const {
  std::vector<Var> params;
  params.reserve(params_.size());
  for (const auto& p : params_) params.push_back(tape.constant(p));
  return forward(input, params);
}

Var Network::forward(const Var& input, std::span<const Var> params) const {
  if (input.shape() != spec_.input_shape) {
    throw ShapeError("network: input shape " + shape_str(input.shape()) + " does not match " +
                     shape_str(spec_.input_shape));
  }
  Var x = input;
  std::size_t p = 0;
  for (const auto& l : spec_.layers) {
    switch (l.type) {
      case LayerType::kAffine: {
        const Var& w = params[p++];
        const Var& b = params[p++];
        x = matmul(w, reshape(x, {l.in, 1}));
        x = add(reshape(x, {l.out}), b);
        break;
      }
      case LayerType::kConv: {
        const Var& w = params[p++];
        const Var& b = params[p++];
        x = conv2d(x, w, b, l.stride, l.pad);
        break;
      }
      case LayerType::kUpsample:
        x = bilinear_resize(x, x.shape()[1] * l.factor, x.shape()[2] * l.factor);
        break;
      case LayerType::kReshape: x = reshape(x, l.shape); break;
    }
    x = activate(x, l.activation);
  }
  return x;
}

}  // namespace advobj
