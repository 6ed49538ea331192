#include "advobj/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace advobj {

namespace {

std::atomic<bool> g_sigmoid_fault{false};

using TensorPtr = std::shared_ptr<const Tensor>;

TensorPtr make(Tensor t) { return std::make_shared<const Tensor>(std::move(t)); }

Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  }
  return a.tape();
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

// Elementwise map with a pointwise derivative expressed in terms of the input
// and output values.
template <typename F, typename D>
Var unary(OpKind op, const Var& x, F f, D dfdx) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  auto out_ptr = make(std::move(out));
  auto in_ptr = x.tape().value_ptr(x.id());
  return x.tape().record(
      op, out_ptr, {x},
      [in_ptr, out_ptr, dfdx](const Tensor& g, std::span<Tensor* const> gi) {
        Tensor& gx = *gi[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          gx[i] += g[i] * dfdx((*in_ptr)[i], (*out_ptr)[i]);
        }
      });
}

enum class Binary { kAdd, kSub, kMul };

Var binary(Binary kind, OpKind op, const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b, op_name(op));
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool same = av.shape() == bv.shape();
  const bool a_scalar = !same && av.size() == 1;
  const bool b_scalar = !same && bv.size() == 1;
  if (!same && !a_scalar && !b_scalar) {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " +
                     shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const Shape& out_shape = a_scalar ? bv.shape() : av.shape();
  Tensor out(out_shape);
  const std::size_t n = out.size();
  auto a_at = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto b_at = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case Binary::kAdd: out[i] = a_at(i) + b_at(i); break;
      case Binary::kSub: out[i] = a_at(i) - b_at(i); break;
      case Binary::kMul: out[i] = a_at(i) * b_at(i); break;
    }
  }
  auto a_ptr = tape.value_ptr(a.id());
  auto b_ptr = tape.value_ptr(b.id());
  return tape.record(
      op, make(std::move(out)), {a, b},
      [kind, a_ptr, b_ptr, a_scalar, b_scalar](const Tensor& g,
                                                std::span<Tensor* const> gi) {
        const Tensor& av = *a_ptr;
        const Tensor& bv = *b_ptr;
        for (std::size_t i = 0; i < g.size(); ++i) {
          double da = 0.0;
          double db = 0.0;
          switch (kind) {
            case Binary::kAdd: da = g[i]; db = g[i]; break;
            case Binary::kSub: da = g[i]; db = -g[i]; break;
            case Binary::kMul:
              da = g[i] * (b_scalar ? bv[0] : bv[i]);
              db = g[i] * (a_scalar ? av[0] : av[i]);
              break;
          }
          if (gi[0]) (*gi[0])[a_scalar ? 0 : i] += da;
          if (gi[1]) (*gi[1])[b_scalar ? 0 : i] += db;
        }
      });
}

struct BilinearTap {
  std::size_t y0, y1, x0, x1;
  double wy, wx;
};

// Caller guarantees fy in [0,h-1] and fx in [0,w-1].
BilinearTap bilinear_tap(double fy, double fx, std::size_t h, std::size_t w) {
  BilinearTap t;
  const double y0 = std::floor(fy);
  const double x0 = std::floor(fx);
  t.y0 = static_cast<std::size_t>(y0);
  t.x0 = static_cast<std::size_t>(x0);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.wy = fy - y0;
  t.wx = fx - x0;
  return t;
}

double bilinear_read(const double* plane, std::size_t w, const BilinearTap& t) {
  const double top = (1.0 - t.wx) * plane[t.y0 * w + t.x0] + t.wx * plane[t.y0 * w + t.x1];
  const double bot = (1.0 - t.wx) * plane[t.y1 * w + t.x0] + t.wx * plane[t.y1 * w + t.x1];
  return (1.0 - t.wy) * top + t.wy * bot;
}

void bilinear_scatter(double* plane, std::size_t w, const BilinearTap& t, double g) {
  plane[t.y0 * w + t.x0] += g * (1.0 - t.wy) * (1.0 - t.wx);
  plane[t.y0 * w + t.x1] += g * (1.0 - t.wy) * t.wx;
  plane[t.y1 * w + t.x0] += g * t.wy * (1.0 - t.wx);
  plane[t.y1 * w + t.x1] += g * t.wy * t.wx;
}

// Samples every output pixel of a [C,*,*] input at the coordinates produced by
// `coord(i, j, &fy, &fx)`; pixels for which it returns false are zero.
template <typename Coord>
Var resample(OpKind op, const Var& x, std::size_t out_h, std::size_t out_w, Coord coord) {
  const Tensor& in = x.value();
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  struct Sample {
    std::size_t out_index;
    BilinearTap tap;
  };
  std::vector<Sample> samples;
  samples.reserve(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      double fy = 0.0, fx = 0.0;
      if (coord(i, j, fy, fx)) samples.push_back({i * out_w + j, bilinear_tap(fy, fx, h, w)});
    }
  }
  Tensor out({c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = in.data().data() + ch * h * w;
    double* dst = out.data().data() + ch * out_h * out_w;
    for (const auto& s : samples) dst[s.out_index] = bilinear_read(plane, w, s.tap);
  }
  auto shared = std::make_shared<const std::vector<Sample>>(std::move(samples));
  return x.tape().record(
      op, make(std::move(out)), {x},
      [shared, c, h, w, out_h, out_w](const Tensor& g, std::span<Tensor* const> gi) {
        Tensor& gx = *gi[0];
        for (std::size_t ch = 0; ch < c; ++ch) {
          double* plane = gx.data().data() + ch * h * w;
          const double* src = g.data().data() + ch * out_h * out_w;
          for (const auto& s : *shared) bilinear_scatter(plane, w, s.tap, src[s.out_index]);
        }
      });
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kClamp01: return "clamp01";
    case OpKind::kClampMin: return "clamp_min";
    case OpKind::kBilinearResize: return "bilinear_resize";
    case OpKind::kGridTranslate: return "grid_translate";
    case OpKind::kScalarScale: return "scalar_scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kSoftmaxRows: return "softmax_rows";
    case OpKind::kSelectColumn: return "select_column";
    case OpKind::kGather: return "gather";
    case OpKind::kGaussianBlur: return "gaussian_blur";
    case OpKind::kCropResize: return "crop_resize";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Var / Gradients / Tape
// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

const Tensor& Gradients::operator[](const Var& leaf) const { return at(leaf.id()); }

const Tensor& Gradients::at(std::size_t leaf_id) const {
  auto it = grads_.find(leaf_id);
  if (it == grads_.end()) {
    throw std::out_of_range("gradients: node " + std::to_string(leaf_id) +
                            " is not a grad-requiring leaf");
  }
  return it->second;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back({requires_grad ? OpKind::kLeaf : OpKind::kConstant,
                    make(std::move(value)), {}, requires_grad, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::constant(std::shared_ptr<const Tensor> value) {
  nodes_.push_back({OpKind::kConstant, std::move(value), {}, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(OpKind op, std::shared_ptr<const Tensor> value, std::vector<Var> inputs,
                 BackwardFn backward) {
  Node node{op, std::move(value), {}, false, {}};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (&in.tape() != this) {
      throw std::invalid_argument(std::string(op_name(op)) + ": input from another tape");
    }
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& loss) const {
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss from another tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.value().shape()));
  }
  std::vector<std::optional<Tensor>> grads(loss.id() + 1);
  Gradients result;
  if (nodes_[loss.id()].requires_grad) {
    grads[loss.id()] = Tensor(loss.value().shape(), 1.0);
  }
  std::vector<Tensor*> grad_in;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grads[id] || !node.backward) continue;
    grad_in.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (!grads[in]) grads[in] = Tensor(nodes_[in].value->shape());
      grad_in[k] = &*grads[in];
    }
    node.backward(*grads[id], grad_in);
    // Interior gradients are no longer needed once propagated.
    if (node.op != OpKind::kLeaf) grads[id].reset();
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].op != OpKind::kLeaf) continue;
    if (id < grads.size() && grads[id]) {
      result.grads_.emplace(id, std::move(*grads[id]));
    } else {
      result.grads_.emplace(id, Tensor(nodes_[id].value->shape()));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) { return binary(Binary::kAdd, OpKind::kAdd, a, b); }
Var sub(const Var& a, const Var& b) { return binary(Binary::kSub, OpKind::kSub, a, b); }
Var mul(const Var& a, const Var& b) { return binary(Binary::kMul, OpKind::kMul, a, b); }

Var relu(const Var& x) {
  return unary(
      OpKind::kRelu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Var tanh(const Var& x) {
  return unary(
      OpKind::kTanh, x, [](double v) { return std::tanh(v); },
      [](double, double out) { return 1.0 - out * out; });
}

Var sigmoid(const Var& x) {
  return unary(
      OpKind::kSigmoid, x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double out) {
        if (g_sigmoid_fault.load(std::memory_order_relaxed)) return out;
        return out * (1.0 - out);
      });
}

Var log(const Var& x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) {
      throw std::domain_error("log: non-positive input " + std::to_string(v) +
                              " in tensor of shape " + shape_str(x.shape()));
    }
  }
  return unary(
      OpKind::kLog, x, [](double v) { return std::log(v); },
      [](double in, double) { return 1.0 / in; });
}

Var exp(const Var& x) {
  return unary(
      OpKind::kExp, x, [](double v) { return std::exp(v); },
      [](double, double out) { return out; });
}

Var sqrt(const Var& x) {
  for (double v : x.value().data()) {
    if (v < 0.0) throw std::domain_error("sqrt: negative input " + std::to_string(v));
  }
  return unary(
      OpKind::kSqrt, x, [](double v) { return std::sqrt(v); },
      [](double, double out) { return out > 0.0 ? 0.5 / out : 0.0; });
}

Var clamp01(const Var& x) {
  return unary(
      OpKind::kClamp01, x, [](double v) { return std::clamp(v, 0.0, 1.0); },
      [](double, double) { return 1.0; });
}

Var clamp_min(const Var& x, double floor) {
  return unary(
      OpKind::kClampMin, x, [floor](double v) { return v < floor ? floor : v; },
      [floor](double in, double) { return in < floor ? 0.0 : 1.0; });
}

Var scalar_scale(const Var& x, double factor) {
  return unary(
      OpKind::kScalarScale, x, [factor](double v) { return factor * v; },
      [factor](double, double) { return factor; });
}

Var add_scalar(const Var& x, double offset) {
  return unary(
      OpKind::kAddScalar, x, [offset](double v) { return v + offset; },
      [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return x.tape().record(OpKind::kSum, make(Tensor::scalar(total)), {x},
                         [](const Tensor& g, std::span<Tensor* const> gi) {
                           for (double& v : gi[0]->data()) v += g[0];
                         });
}

Var mean(const Var& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return x.tape().record(OpKind::kMean, make(Tensor::scalar(total / n)), {x},
                         [n](const Tensor& g, std::span<Tensor* const> gi) {
                           const double share = g[0] / static_cast<double>(n);
                           for (double& v : gi[0]->data()) v += share;
                         });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(OpKind::kReshape, make(std::move(out)), {x},
                         [](const Tensor& g, std::span<Tensor* const> gi) {
                           Tensor& gx = *gi[0];
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         });
}

Var transpose(const Var& x) {
  const Tensor& in = x.value();
  require_rank("transpose", in, 2);
  const std::size_t m = in.dim(0), n = in.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  return x.tape().record(OpKind::kTranspose, make(std::move(out)), {x},
                         [m, n](const Tensor& g, std::span<Tensor* const> gi) {
                           Tensor& gx = *gi[0];
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
                         });
}

Var softmax_rows(const Var& x) {
  const Tensor& in = x.value();
  require_rank("softmax_rows", in, 2);
  const std::size_t rows = in.dim(0), cols = in.dim(1);
  Tensor out(in.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data().data() + r * cols;
    double* dst = out.data().data() + r * cols;
    const double peak = *std::max_element(src, src + cols);
    double total = 0.0;
    for (std::size_t k = 0; k < cols; ++k) total += dst[k] = std::exp(src[k] - peak);
    for (std::size_t k = 0; k < cols; ++k) dst[k] /= total;
  }
  auto out_ptr = make(std::move(out));
  return x.tape().record(
      OpKind::kSoftmaxRows, out_ptr, {x},
      [out_ptr, rows, cols](const Tensor& g, std::span<Tensor* const> gi) {
        const Tensor& y = *out_ptr;
        Tensor& gx = *gi[0];
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t k = 0; k < cols; ++k) dot += g[r * cols + k] * y[r * cols + k];
          for (std::size_t k = 0; k < cols; ++k)
            gx[r * cols + k] += y[r * cols + k] * (g[r * cols + k] - dot);
        }
      });
}

Var select_column(const Var& x, std::size_t column) {
  const Tensor& in = x.value();
  require_rank("select_column", in, 2);
  const std::size_t rows = in.dim(0), cols = in.dim(1);
  if (column >= cols) {
    throw ShapeError("select_column: column " + std::to_string(column) +
                     " out of range for shape " + shape_str(in.shape()));
  }
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) out[r] = in[r * cols + column];
  return x.tape().record(OpKind::kSelectColumn, make(std::move(out)), {x},
                         [rows, cols, column](const Tensor& g, std::span<Tensor* const> gi) {
                           for (std::size_t r = 0; r < rows; ++r)
                             (*gi[0])[r * cols + column] += g[r];
                         });
}

Var gather(const Var& x, std::vector<std::size_t> indices) {
  const Tensor& in = x.value();
  require_rank("gather", in, 1);
  Tensor out({indices.size()});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= in.size()) {
      throw ShapeError("gather: index " + std::to_string(indices[k]) +
                       " out of range for shape " + shape_str(in.shape()));
    }
    out[k] = in[indices[k]];
  }
  return x.tape().record(OpKind::kGather, make(std::move(out)), {x},
                         [idx = std::move(indices)](const Tensor& g,
                                                    std::span<Tensor* const> gi) {
                           for (std::size_t k = 0; k < idx.size(); ++k) (*gi[0])[idx[k]] += g[k];
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  auto a_ptr = tape.value_ptr(a.id());
  auto b_ptr = tape.value_ptr(b.id());
  return tape.record(
      OpKind::kMatmul, make(std::move(out)), {a, b},
      [a_ptr, b_ptr, m, k, n](const Tensor& g, std::span<Tensor* const> gi) {
        const Tensor& av = *a_ptr;
        const Tensor& bv = *b_ptr;
        if (gi[0]) {
          Tensor& ga = *gi[0];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
              ga[i * k + p] += acc;
            }
        }
        if (gi[1]) {
          Tensor& gb = *gi[1];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = av[i * k + p];
              if (aip == 0.0) continue;
              double* grow = gb.data().data() + p * n;
              const double* g_row = g.data().data() + i * n;
              for (std::size_t j = 0; j < n; ++j) grow[j] += aip * g_row[j];
            }
        }
      });
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width, out_channels, kh, kw, stride, pad, out_h, out_w;

  // Output index range [lo, hi) along one axis for which in = o*stride + k - pad
  // stays inside [0, extent).
  std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t extent,
                                                  std::size_t out_extent) const {
    const long s = static_cast<long>(stride);
    const long off = static_cast<long>(k) - static_cast<long>(pad);
    long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    long hi = (static_cast<long>(extent) - 1 - off);
    hi = hi < 0 ? 0 : hi / s + 1;
    lo = std::min<long>(lo, static_cast<long>(out_extent));
    hi = std::min<long>(hi, static_cast<long>(out_extent));
    if (hi < lo) hi = lo;
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }
};

}  // namespace

Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias,
           std::size_t stride, std::size_t pad) {
  Tape& tape = same_tape(input, weight, "conv2d");
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: incompatible input " + shape_str(x.shape()) + " and weight " +
                     shape_str(w.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (x.dim(1) + 2 * pad < w.dim(2) || x.dim(2) + 2 * pad < w.dim(3)) {
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  if (bias) {
    same_tape(input, *bias, "conv2d");
    if (bias->value().rank() != 1 || bias->value().dim(0) != w.dim(0)) {
      throw ShapeError("conv2d: bias " + shape_str(bias->value().shape()) +
                       " does not match weight " + shape_str(w.shape()));
    }
  }
  ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), w.dim(3), stride, pad, 0, 0};
  geo.out_h = (geo.height + 2 * pad - geo.kh) / stride + 1;
  geo.out_w = (geo.width + 2 * pad - geo.kw) / stride + 1;

  Tensor out({geo.out_channels, geo.out_h, geo.out_w});
  const std::size_t plane_out = geo.out_h * geo.out_w;
  const std::size_t plane_in = geo.height * geo.width;
  if (bias) {
    for (std::size_t o = 0; o < geo.out_channels; ++o)
      std::fill_n(out.data().data() + o * plane_out, plane_out, bias->value()[o]);
  }
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  double* od = out.data().data();
  for (std::size_t o = 0; o < geo.out_channels; ++o) {
    for (std::size_t c = 0; c < geo.channels; ++c) {
      for (std::size_t ky = 0; ky < geo.kh; ++ky) {
        const auto [oy_lo, oy_hi] = geo.valid_range(ky, geo.height, geo.out_h);
        for (std::size_t kx = 0; kx < geo.kw; ++kx) {
          const auto [ox_lo, ox_hi] = geo.valid_range(kx, geo.width, geo.out_w);
          const double wv = wd[((o * geo.channels + c) * geo.kh + ky) * geo.kw + kx];
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            const std::size_t iy = oy * stride + ky - pad;
            const double* xrow = xd + c * plane_in + iy * geo.width + kx - pad;
            double* orow = od + o * plane_out + oy * geo.out_w;
            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * xrow[ox * stride];
          }
        }
      }
    }
  }

  std::vector<Var> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  auto x_ptr = tape.value_ptr(input.id());
  auto w_ptr = tape.value_ptr(weight.id());
  return tape.record(
      OpKind::kConv2d, make(std::move(out)), std::move(inputs),
      [geo, x_ptr, w_ptr](const Tensor& g, std::span<Tensor* const> gi) {
        const std::size_t plane_out = geo.out_h * geo.out_w;
        const std::size_t plane_in = geo.height * geo.width;
        const double* gd = g.data().data();
        const double* xd = x_ptr->data().data();
        const double* wd = w_ptr->data().data();
        double* gx = gi[0] ? gi[0]->data().data() : nullptr;
        double* gw = gi[1] ? gi[1]->data().data() : nullptr;
        if (gi.size() > 2 && gi[2]) {
          for (std::size_t o = 0; o < geo.out_channels; ++o) {
            double acc = 0.0;
            for (std::size_t p = 0; p < plane_out; ++p) acc += gd[o * plane_out + p];
            (*gi[2])[o] += acc;
          }
        }
        if (!gx && !gw) return;
        for (std::size_t o = 0; o < geo.out_channels; ++o) {
          for (std::size_t c = 0; c < geo.channels; ++c) {
            for (std::size_t ky = 0; ky < geo.kh; ++ky) {
              const auto [oy_lo, oy_hi] = geo.valid_range(ky, geo.height, geo.out_h);
              for (std::size_t kx = 0; kx < geo.kw; ++kx) {
                const auto [ox_lo, ox_hi] = geo.valid_range(kx, geo.width, geo.out_w);
                const std::size_t widx = ((o * geo.channels + c) * geo.kh + ky) * geo.kw + kx;
                const double wv = wd[widx];
                double wacc = 0.0;
                for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                  const std::size_t iy = oy * geo.stride + ky - geo.pad;
                  const std::size_t base = c * plane_in + iy * geo.width + kx - geo.pad;
                  const double* grow = gd + o * plane_out + oy * geo.out_w;
                  if (gx) {
                    double* gxrow = gx + base;
                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                      gxrow[ox * geo.stride] += wv * grow[ox];
                  }
                  if (gw) {
                    const double* xrow = xd + base;
                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                      wacc += grow[ox] * xrow[ox * geo.stride];
                  }
                }
                if (gw) gw[widx] += wacc;
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

Var bilinear_resize(const Var& x, std::size_t out_h, std::size_t out_w) {
  require_rank("bilinear_resize", x.value(), 3);
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: empty output size");
  const std::size_t h = x.value().dim(1), w = x.value().dim(2);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  return resample(OpKind::kBilinearResize, x, out_h, out_w,
                  [=](std::size_t i, std::size_t j, double& fy, double& fx) {
                    fy = std::clamp((i + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
                    fx = std::clamp((j + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
                    return true;
                  });
}

Var grid_translate(const Var& image, double x, double y, std::size_t out_h,
                   std::size_t out_w) {
  require_rank("grid_translate", image.value(), 3);
  const double max_y = static_cast<double>(image.value().dim(1) - 1);
  const double max_x = static_cast<double>(image.value().dim(2) - 1);
  return resample(OpKind::kGridTranslate, image, out_h, out_w,
                  [=](std::size_t i, std::size_t j, double& fy, double& fx) {
                    fy = static_cast<double>(i) - y;
                    fx = static_cast<double>(j) - x;
                    return fy >= 0.0 && fy <= max_y && fx >= 0.0 && fx <= max_x;
                  });
}

Var crop_resize(const Var& x, double box_x, double box_y, double box_w, double box_h,
                std::size_t out_h, std::size_t out_w) {
  require_rank("crop_resize", x.value(), 3);
  const double h = static_cast<double>(x.value().dim(1));
  const double w = static_cast<double>(x.value().dim(2));
  if (!(box_x >= 0.0 && box_y >= 0.0 && box_w >= 1.0 && box_h >= 1.0 && box_x + box_w <= w &&
        box_y + box_h <= h) ||
      out_h == 0 || out_w == 0) {
    throw std::out_of_range("crop_resize: box (" + std::to_string(box_x) + ", " +
                            std::to_string(box_y) + ", " + std::to_string(box_w) + ", " +
                            std::to_string(box_h) + ") outside image " +
                            shape_str(x.value().shape()));
  }
  const double step_y = out_h > 1 ? (box_h - 1.0) / static_cast<double>(out_h - 1) : 0.0;
  const double step_x = out_w > 1 ? (box_w - 1.0) / static_cast<double>(out_w - 1) : 0.0;
  return resample(OpKind::kCropResize, x, out_h, out_w,
                  [=](std::size_t i, std::size_t j, double& fy, double& fx) {
                    fy = std::min(box_y + static_cast<double>(i) * step_y, h - 1.0);
                    fx = std::min(box_x + static_cast<double>(j) * step_x, w - 1.0);
                    return true;
                  });
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_kernel: negative sigma");
  if (sigma == 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    total += taps[k + radius] = std::exp(-(k * k) / (2.0 * sigma * sigma));
  }
  for (double& t : taps) t /= total;
  return taps;
}

Var gaussian_blur(const Var& x, double sigma) {
  require_rank("gaussian_blur", x.value(), 3);
  const auto taps = gaussian_kernel(sigma);
  const long radius = static_cast<long>(taps.size() / 2);
  const Tensor& in = x.value();
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  auto clampi = [](long v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1));
  };
  // Horizontal then vertical pass, edges replicated.
  auto blur = [&](const Tensor& src) {
    Tensor tmp(src.shape());
    Tensor out(src.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          double acc = 0.0;
          for (long k = -radius; k <= radius; ++k)
            acc += taps[k + radius] * src.at(ch, i, clampi(static_cast<long>(j) + k, w));
          tmp.at(ch, i, j) = acc;
        }
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          double acc = 0.0;
          for (long k = -radius; k <= radius; ++k)
            acc += taps[k + radius] * tmp.at(ch, clampi(static_cast<long>(i) + k, h), j);
          out.at(ch, i, j) = acc;
        }
    return out;
  };
  if (radius == 0) {
    return x.tape().record(OpKind::kGaussianBlur, make(in), {x},
                           [](const Tensor& g, std::span<Tensor* const> gi) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                           });
  }
  return x.tape().record(
      OpKind::kGaussianBlur, make(blur(in)), {x},
      [taps, radius, c, h, w, clampi](const Tensor& g, std::span<Tensor* const> gi) {
        // Adjoint of the two passes, applied in reverse order.
        Tensor tmp(g.shape());
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
              const double gv = g.at(ch, i, j);
              for (long k = -radius; k <= radius; ++k)
                tmp.at(ch, clampi(static_cast<long>(i) + k, h), j) += taps[k + radius] * gv;
            }
        Tensor& gx = *gi[0];
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
              const double tv = tmp.at(ch, i, j);
              for (long k = -radius; k <= radius; ++k)
                gx.at(ch, i, clampi(static_cast<long>(j) + k, w)) += taps[k + radius] * tv;
            }
      });
}

namespace fault {
void set_sigmoid_backward_fault(bool enabled) { g_sigmoid_fault.store(enabled); }
bool sigmoid_backward_fault() { return g_sigmoid_fault.load(); }
}  // namespace fault

}  // namespace advobj
