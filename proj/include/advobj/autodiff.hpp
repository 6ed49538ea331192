#pragma once

// Reverse-mode automatic differentiation over Tensors.
//
// A Tape records every value produced while building a computation. Values
// are addressed through lightweight Var handles. Nodes whose inputs do not
// require gradients are stored as plain values with no backward rule. A Tape
// and all Vars referring to it must stay on one thread.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "advobj/tensor.hpp"

namespace advobj {

enum class OpKind {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kMatmul,
  kConv2d,
  kRelu,
  kTanh,
  kSigmoid,
  kLog,
  kExp,
  kSqrt,
  kSum,
  kMean,
  kClamp01,
  kClampMin,
  kBilinearResize,
  kGridTranslate,
  kScalarScale,
  kAddScalar,
  kReshape,
  kTranspose,
  kSoftmaxRows,
  kSelectColumn,
  kGather,
  kGaussianBlur,
  kCropResize,
};

const char* op_name(OpKind op);

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Result of a backward pass: dLoss/dLeaf for every leaf that requires grad.
class Gradients {
 public:
  const Tensor& operator[](const Var& leaf) const;
  const Tensor& at(std::size_t leaf_id) const;
  bool contains(const Var& leaf) const { return grads_.count(leaf.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Tensor> grads_;
};

/// Accumulates the input gradients of one node. `grad_in[k]` is null when
/// input k does not require a gradient; otherwise the rule adds into it.
using BackwardFn =
    std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value);
  /// Constant that shares storage with the caller (model weights).
  Var constant(std::shared_ptr<const Tensor> value);

  /// Records the result of an op. The backward rule is dropped when no
  /// input requires a gradient.
  Var record(OpKind op, std::shared_ptr<const Tensor> value,
             std::vector<Var> inputs, BackwardFn backward);

  /// Gradients of a one-element loss w.r.t. every grad-requiring leaf.
  /// Does not mutate the tape, so repeated calls return identical results.
  Gradients backward(const Var& loss) const;

  std::size_t size() const { return nodes_.size(); }
  OpKind op_at(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs_at(std::size_t id) const {
    return nodes_.at(id).inputs;
  }

  const Tensor& value(std::size_t id) const { return *nodes_[id].value; }
  std::shared_ptr<const Tensor> value_ptr(std::size_t id) const {
    return nodes_[id].value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    OpKind op;
    std::shared_ptr<const Tensor> value;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations. All inputs must live on the same tape.
//
// Elementwise binary ops accept equal shapes, or one operand with a single
// element, which is broadcast.
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

/// [m,k] x [k,n] -> [m,n].
Var matmul(const Var& a, const Var& b);

/// input [C,H,W], weight [O,C,kh,kw], optional bias [O] -> [O,Ho,Wo] with
/// Ho = (H + 2*pad - kh) / stride + 1. Zero padding.
Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias,
           std::size_t stride = 1, std::size_t pad = 0);

Var relu(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
/// Natural log; throws on any non-positive element.
Var log(const Var& x);
Var exp(const Var& x);
Var sqrt(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);

/// Clamp to [0,1] with a straight-through (identity) gradient.
Var clamp01(const Var& x);
/// max(x, floor) with the true gradient (zero where floored).
Var clamp_min(const Var& x, double floor);

/// [C,H,W] -> [C,out_h,out_w], half-pixel-centre bilinear sampling.
/// Same-size resize is the identity.
Var bilinear_resize(const Var& x, std::size_t out_h, std::size_t out_w);

/// Places image [C,h,w] with its top-left at fractional (x, y) on a zero
/// canvas [C,out_h,out_w]. Canvas pixel (i,j) samples the image bilinearly at
/// (i - y, j - x) when that point lies inside [0,h-1] x [0,w-1]; other
/// pixels are zero.
Var grid_translate(const Var& image, double x, double y, std::size_t out_h,
                   std::size_t out_w);

Var scalar_scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);

Var reshape(const Var& x, Shape shape);
/// [m,n] -> [n,m].
Var transpose(const Var& x);
/// Row-wise softmax of [n,m].
Var softmax_rows(const Var& x);
/// Column c of [n,m] as [n].
Var select_column(const Var& x, std::size_t column);
/// Elements of a rank-1 tensor at the given indices.
Var gather(const Var& x, std::vector<std::size_t> indices);

/// Separable Gaussian blur of [C,H,W] with edge replication. Kernel radius
/// ceil(3*sigma), weights normalised to sum to one. sigma == 0 is identity.
Var gaussian_blur(const Var& x, double sigma);

/// Bilinear crop of [C,H,W] over box (x, y, w, h) in pixel units to
/// [C,out_h,out_w]. Output pixel (i,j) samples the input at
/// (y + i*(h-1)/(out_h-1), x + j*(w-1)/(out_w-1)), or the box origin
/// when the output extent is 1.
Var crop_resize(const Var& x, double box_x, double box_y, double box_w,
                double box_h, std::size_t out_h, std::size_t out_w);

/// Normalised Gaussian taps for radius ceil(3*sigma).
std::vector<double> gaussian_kernel(double sigma);

namespace fault {
/// Fault injection for exercising the gradient checker: when set, the
/// sigmoid backward rule returns a wrong derivative.
void set_sigmoid_backward_fault(bool enabled);
bool sigmoid_backward_fault();
}  // namespace fault

}  // namespace advobj
