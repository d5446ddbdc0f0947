#include "spurlens/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

namespace spurlens {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Index element_count(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tape

template <class Scalar>
Var<Scalar> Tape<Scalar>::leaf(Tensor<Scalar> value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <class Scalar>
Var<Scalar> Tape<Scalar>::record(Tensor<Scalar> value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (std::size_t i : inputs) {
    if (i >= nodes_.size()) throw ContractError("tape input refers to a node that does not exist yet");
    node.requires_grad = node.requires_grad || nodes_[i].requires_grad;
  }
  if (node.requires_grad) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <class Scalar>
Tensor<Scalar>* Tape<Scalar>::slot(Grads& grads, std::size_t input) const {
  if (!nodes_[input].requires_grad) return nullptr;
  if (grads[input].empty()) grads[input] = Tensor<Scalar>(nodes_[input].value.shape());
  return &grads[input];
}

template <class Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& root) {
  if (&root.tape() != this) throw ContractError("backward root is not on this tape");
  const std::size_t r = root.index();
  if (nodes_.at(r).value.size() != 1) {
    throw ContractError("backward root must be a scalar, got shape " + shape_string(nodes_[r].value.shape()));
  }
  if (!nodes_[r].requires_grad) return;

  // Fresh per-call buffers; results are added to the persistent grads at the
  // end so repeated calls accumulate exactly once per call.
  Grads grads(r + 1);
  grads[r] = Tensor<Scalar>(nodes_[r].value.shape(), Scalar(1));
  for (std::size_t i = r + 1; i-- > 0;) {
    if (grads[i].empty()) continue;
    const Node& node = nodes_[i];
    if (node.backward) node.backward(grads, i);
  }
  for (std::size_t i = 0; i <= r; ++i) {
    if (grads[i].empty() || !nodes_[i].requires_grad) continue;
    Tensor<Scalar>& g = nodes_[i].grad;
    if (g.empty()) {
      g = std::move(grads[i]);
    } else {
      g.array() += grads[i].array();
    }
  }
}

template <class Scalar>
void Tape<Scalar>::zero_grad() {
  for (Node& node : nodes_) node.grad = Tensor<Scalar>();
}

template <class Scalar>
const Tensor<Scalar>& Tape<Scalar>::grad(std::size_t i) const {
  const Node& node = nodes_.at(i);
  if (node.grad.empty()) {
    empty_grad_ = Tensor<Scalar>(node.value.shape());
    return empty_grad_;
  }
  return node.grad;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

template <class Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
}

template <class Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <class Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <class Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

template <class Scalar, class F>
Var<Scalar> unary(const Var<Scalar>& x, F&& forward, std::function<Scalar(Scalar x, Scalar y)> derivative) {
  Tape<Scalar>& tape = x.tape();
  Tensor<Scalar> out(x.shape());
  const Tensor<Scalar>& in = x.value();
  for (Index i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  const std::size_t xi = x.index();
  return tape.record(std::move(out), {xi}, [&tape, xi, derivative](auto& grads, std::size_t self) {
    Tensor<Scalar>* gx = tape.slot(grads, xi);
    if (!gx) return;
    const Tensor<Scalar>& g = grads[self];
    const Tensor<Scalar>& xv = tape.value(xi);
    const Tensor<Scalar>& yv = tape.value(self);
    for (Index i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * derivative(xv[i], yv[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul

template <class Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_tape(a, b, "matmul");
  Tape<Scalar>& tape = a.tape();
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3))) {
    throw DimensionError("matmul expects two rank-2 or two rank-3 operands, got " + shape_string(sa) + " and " +
                         shape_string(sb));
  }
  const Index batch = batched ? sa[0] : 1;
  const Index m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  const Index k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != k2 || (batched && sb[0] != batch)) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(sa) + " · " + shape_string(sb));
  }
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor<Scalar> out(out_shape);
  const Scalar* pa = a.value().data();
  const Scalar* pb = b.value().data();
  for (Index t = 0; t < batch; ++t) {
    MatMap<Scalar>(out.data() + t * m * n, m, n).noalias() =
        ConstMatMap<Scalar>(pa + t * m * k, m, k) * ConstMatMap<Scalar>(pb + t * k * n, k, n);
  }
  const std::size_t ai = a.index(), bi = b.index();
  return tape.record(std::move(out), {ai, bi}, [&tape, ai, bi, batch, m, k, n](auto& grads, std::size_t self) {
    const Scalar* g = grads[self].data();
    const Scalar* pa = tape.value(ai).data();
    const Scalar* pb = tape.value(bi).data();
    if (Tensor<Scalar>* ga = tape.slot(grads, ai)) {
      for (Index t = 0; t < batch; ++t) {
        MatMap<Scalar>(ga->data() + t * m * k, m, k).noalias() +=
            ConstMatMap<Scalar>(g + t * m * n, m, n) * ConstMatMap<Scalar>(pb + t * k * n, k, n).transpose();
      }
    }
    if (Tensor<Scalar>* gb = tape.slot(grads, bi)) {
      for (Index t = 0; t < batch; ++t) {
        MatMap<Scalar>(gb->data() + t * k * n, k, n).noalias() +=
            ConstMatMap<Scalar>(pa + t * m * k, m, k).transpose() * ConstMatMap<Scalar>(g + t * m * n, m, n);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d via im2col

namespace {

struct ConvGeometry {
  Index channels, height, width, filters, kh, kw, stride, padding, out_h, out_w;
  Index patch() const { return channels * kh * kw; }
  Index out_pixels() const { return out_h * out_w; }
};

template <class Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* cols) {
  const Index npix = g.out_pixels();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        Scalar* row = cols + ((c * g.kh + ki) * g.kw + kj) * npix;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + ki;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + kj;
            const bool inside = ih >= 0 && ih < g.height && iw >= 0 && iw < g.width;
            row[oh * g.out_w + ow] = inside ? image[(c * g.height + ih) * g.width + iw] : Scalar(0);
          }
        }
      }
    }
  }
}

template <class Scalar>
void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* image) {
  const Index npix = g.out_pixels();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = cols + ((c * g.kh + ki) * g.kw + kj) * npix;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) continue;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + kj;
            if (iw < 0 || iw >= g.width) continue;
            image[(c * g.height + ih) * g.width + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <class Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernels, Index stride, Index padding) {
  require_same_tape(input, kernels, "conv2d");
  Tape<Scalar>& tape = input.tape();
  const Shape& si = input.shape();
  const Shape& sk = kernels.shape();
  if ((si.size() != 3 && si.size() != 4) || sk.size() != 4) {
    throw DimensionError("conv2d expects input [C×H×W] or [N×C×H×W] and kernels [F×C×k×k], got " +
                         shape_string(si) + " and " + shape_string(sk));
  }
  if (stride < 1) throw ContractError("conv2d stride must be >= 1");
  if (padding < 0) throw ContractError("conv2d padding must be >= 0");
  const bool batched = si.size() == 4;
  const Index batch = batched ? si[0] : 1;
  ConvGeometry g{};
  g.channels = si[si.size() - 3];
  g.height = si[si.size() - 2];
  g.width = si[si.size() - 1];
  g.filters = sk[0];
  g.kh = sk[2];
  g.kw = sk[3];
  g.stride = stride;
  g.padding = padding;
  if (sk[1] != g.channels) {
    throw DimensionError("conv2d channel mismatch: input " + shape_string(si) + ", kernels " + shape_string(sk));
  }
  if (g.kh > g.height + 2 * padding || g.kw > g.width + 2 * padding) {
    throw DimensionError("conv2d kernel " + shape_string(sk) + " larger than padded input " + shape_string(si));
  }
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;

  auto cols = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(batch * g.patch() * g.out_pixels()));
  Shape out_shape = batched ? Shape{batch, g.filters, g.out_h, g.out_w} : Shape{g.filters, g.out_h, g.out_w};
  Tensor<Scalar> out(out_shape);
  const Scalar* x = input.value().data();
  ConstMatMap<Scalar> w(kernels.value().data(), g.filters, g.patch());
  for (Index n = 0; n < batch; ++n) {
    Scalar* c = cols->data() + n * g.patch() * g.out_pixels();
    im2col(x + n * g.channels * g.height * g.width, g, c);
    MatMap<Scalar>(out.data() + n * g.filters * g.out_pixels(), g.filters, g.out_pixels()).noalias() =
        w * ConstMatMap<Scalar>(c, g.patch(), g.out_pixels());
  }

  const std::size_t xi = input.index(), ki = kernels.index();
  return tape.record(std::move(out), {xi, ki}, [&tape, xi, ki, g, batch, cols](auto& grads, std::size_t self) {
    const Scalar* gout = grads[self].data();
    Tensor<Scalar>* gk = tape.slot(grads, ki);
    Tensor<Scalar>* gx = tape.slot(grads, xi);
    ConstMatMap<Scalar> w(tape.value(ki).data(), g.filters, g.patch());
    RowMatrix<Scalar> dcols;
    for (Index n = 0; n < batch; ++n) {
      ConstMatMap<Scalar> go(gout + n * g.filters * g.out_pixels(), g.filters, g.out_pixels());
      ConstMatMap<Scalar> c(cols->data() + n * g.patch() * g.out_pixels(), g.patch(), g.out_pixels());
      if (gk) MatMap<Scalar>(gk->data(), g.filters, g.patch()).noalias() += go * c.transpose();
      if (gx) {
        dcols.noalias() = w.transpose() * go;
        col2im_add(dcols.data(), g, gx->data() + n * g.channels * g.height * g.width);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return unary<Scalar>(
      x, [](Scalar v) { return v > Scalar(0) ? v : Scalar(0); },
      [](Scalar v, Scalar) { return v > Scalar(0) ? Scalar(1) : Scalar(0); });
}

template <class Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary<Scalar>(
      x, [](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * Scalar(kInvSqrt2))); },
      [](Scalar v, Scalar) {
        const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * Scalar(kInvSqrt2)));
        const Scalar pdf = Scalar(kInvSqrt2Pi) * std::exp(Scalar(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

template <class Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return unary<Scalar>(
      x,
      [](Scalar v) {
        if (v >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (Scalar(1) + e);
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <class Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_tape(a, b, "add");
  require_same_shape(a, b, "add");
  Tape<Scalar>& tape = a.tape();
  Tensor<Scalar> out = a.value();
  out.array() += b.value().array();
  const std::size_t ai = a.index(), bi = b.index();
  return tape.record(std::move(out), {ai, bi}, [&tape, ai, bi](auto& grads, std::size_t self) {
    if (Tensor<Scalar>* ga = tape.slot(grads, ai)) ga->array() += grads[self].array();
    if (Tensor<Scalar>* gb = tape.slot(grads, bi)) gb->array() += grads[self].array();
  });
}

template <class Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_tape(a, b, "mul");
  require_same_shape(a, b, "mul");
  Tape<Scalar>& tape = a.tape();
  Tensor<Scalar> out = a.value();
  out.array() *= b.value().array();
  const std::size_t ai = a.index(), bi = b.index();
  return tape.record(std::move(out), {ai, bi}, [&tape, ai, bi](auto& grads, std::size_t self) {
    if (Tensor<Scalar>* ga = tape.slot(grads, ai)) ga->array() += grads[self].array() * tape.value(bi).array();
    if (Tensor<Scalar>* gb = tape.slot(grads, bi)) gb->array() += grads[self].array() * tape.value(ai).array();
  });
}

template <class Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor) {
  Tape<Scalar>& tape = x.tape();
  Tensor<Scalar> out = x.value();
  out.array() *= factor;
  const std::size_t xi = x.index();
  return tape.record(std::move(out), {xi}, [&tape, xi, factor](auto& grads, std::size_t self) {
    if (Tensor<Scalar>* gx = tape.slot(grads, xi)) gx->array() += grads[self].array() * factor;
  });
}

template <class Scalar>
Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& bias, Index axis) {
  require_same_tape(x, bias, "add_bias");
  Tape<Scalar>& tape = x.tape();
  const Shape& sx = x.shape();
  const Shape& sb = bias.shape();
  if (axis < 0 || axis + static_cast<Index>(sb.size()) > static_cast<Index>(sx.size()) ||
      !std::equal(sb.begin(), sb.end(), sx.begin() + axis)) {
    throw DimensionError("add_bias: bias " + shape_string(sb) + " does not match " + shape_string(sx) +
                         " at axis " + std::to_string(axis));
  }
  Index outer = 1, trailing = 1;
  for (Index i = 0; i < axis; ++i) outer *= sx[i];
  for (std::size_t i = axis + sb.size(); i < sx.size(); ++i) trailing *= sx[i];
  const Index inner = bias.value().size();
  Tensor<Scalar> out = x.value();
  const Scalar* b = bias.value().data();
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      Scalar* row = out.data() + (o * inner + i) * trailing;
      for (Index t = 0; t < trailing; ++t) row[t] += b[i];
    }
  }
  const std::size_t xi = x.index(), bi = bias.index();
  return tape.record(std::move(out), {xi, bi}, [&tape, xi, bi, outer, inner, trailing](auto& grads, std::size_t self) {
    const Tensor<Scalar>& g = grads[self];
    if (Tensor<Scalar>* gx = tape.slot(grads, xi)) gx->array() += g.array();
    if (Tensor<Scalar>* gb = tape.slot(grads, bi)) {
      for (Index o = 0; o < outer; ++o) {
        for (Index i = 0; i < inner; ++i) {
          const Scalar* row = g.data() + (o * inner + i) * trailing;
          Scalar acc = 0;
          for (Index t = 0; t < trailing; ++t) acc += row[t];
          (*gb)[i] += acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation

template <class Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  require_same_tape(x, gamma, "layer_norm");
  require_same_tape(x, beta, "layer_norm");
  Tape<Scalar>& tape = x.tape();
  const Index width = x.shape().back();
  if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
    throw DimensionError("layer_norm: gamma/beta must have shape [" + std::to_string(width) + "]");
  }
  const Index rows = x.value().size() / width;
  auto normalized = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(x.value().size()));
  auto rstd = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(rows));
  Tensor<Scalar> out(x.shape());
  const Scalar* in = x.value().data();
  const Scalar* gm = gamma.value().data();
  const Scalar* bt = beta.value().data();
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = in + r * width;
    Scalar mu = 0;
    for (Index j = 0; j < width; ++j) mu += row[j];
    mu /= Scalar(width);
    Scalar var = 0;
    for (Index j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= Scalar(width);
    const Scalar rs = Scalar(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (Index j = 0; j < width; ++j) {
      const Scalar xh = (row[j] - mu) * rs;
      (*normalized)[r * width + j] = xh;
      out[r * width + j] = gm[j] * xh + bt[j];
    }
  }
  const std::size_t xi = x.index(), gi = gamma.index(), bi = beta.index();
  return tape.record(std::move(out), {xi, gi, bi},
                     [&tape, xi, gi, bi, rows, width, normalized, rstd](auto& grads, std::size_t self) {
                       const Scalar* g = grads[self].data();
                       const Scalar* gm = tape.value(gi).data();
                       Tensor<Scalar>* gx = tape.slot(grads, xi);
                       Tensor<Scalar>* gg = tape.slot(grads, gi);
                       Tensor<Scalar>* gb = tape.slot(grads, bi);
                       for (Index r = 0; r < rows; ++r) {
                         const Scalar* gr = g + r * width;
                         const Scalar* xh = normalized->data() + r * width;
                         if (gg || gb) {
                           for (Index j = 0; j < width; ++j) {
                             if (gg) (*gg)[j] += gr[j] * xh[j];
                             if (gb) (*gb)[j] += gr[j];
                           }
                         }
                         if (!gx) continue;
                         Scalar mean_d = 0, mean_dx = 0;
                         for (Index j = 0; j < width; ++j) {
                           const Scalar d = gr[j] * gm[j];
                           mean_d += d;
                           mean_dx += d * xh[j];
                         }
                         mean_d /= Scalar(width);
                         mean_dx /= Scalar(width);
                         Scalar* out = gx->data() + r * width;
                         for (Index j = 0; j < width; ++j) {
                           out[j] += (*rstd)[r] * (gr[j] * gm[j] - mean_d - xh[j] * mean_dx);
                         }
                       }
                     });
}

template <class Scalar>
Var<Scalar> softmax(const Var<Scalar>& x) {
  Tape<Scalar>& tape = x.tape();
  const Index width = x.shape().back();
  const Index rows = x.value().size() / width;
  Tensor<Scalar> out(x.shape());
  const Scalar* in = x.value().data();
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = in + r * width;
    Scalar* o = out.data() + r * width;
    Scalar mx = row[0];
    for (Index j = 1; j < width; ++j) mx = std::max(mx, row[j]);
    Scalar total = 0;
    for (Index j = 0; j < width; ++j) {
      o[j] = std::exp(row[j] - mx);
      total += o[j];
    }
    for (Index j = 0; j < width; ++j) o[j] /= total;
  }
  const std::size_t xi = x.index();
  return tape.record(std::move(out), {xi}, [&tape, xi, rows, width](auto& grads, std::size_t self) {
    Tensor<Scalar>* gx = tape.slot(grads, xi);
    if (!gx) return;
    const Scalar* g = grads[self].data();
    const Scalar* y = tape.value(self).data();
    for (Index r = 0; r < rows; ++r) {
      const Scalar* gr = g + r * width;
      const Scalar* yr = y + r * width;
      Scalar dot = 0;
      for (Index j = 0; j < width; ++j) dot += gr[j] * yr[j];
      Scalar* o = gx->data() + r * width;
      for (Index j = 0; j < width; ++j) o[j] += yr[j] * (gr[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tape<Scalar>& tape = x.tape();
  Scalar acc = 0;
  for (Scalar v : x.value().values()) acc += v;
  const std::size_t xi = x.index();
  return tape.record(Tensor<Scalar>::scalar(acc), {xi}, [&tape, xi](auto& grads, std::size_t self) {
    if (Tensor<Scalar>* gx = tape.slot(grads, xi)) gx->array() += grads[self][0];
  });
}

template <class Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  return scale(sum(x), Scalar(1) / Scalar(x.value().size()));
}

template <class Scalar>
Var<Scalar> mean_last(const Var<Scalar>& x) {
  Tape<Scalar>& tape = x.tape();
  const Shape& sx = x.shape();
  const Index width = sx.back();
  const Index rows = x.value().size() / width;
  Shape out_shape(sx.begin(), sx.end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<Scalar> out(out_shape);
  const Scalar* in = x.value().data();
  for (Index r = 0; r < rows; ++r) {
    Scalar acc = 0;
    for (Index j = 0; j < width; ++j) acc += in[r * width + j];
    out[r] = acc / Scalar(width);
  }
  const std::size_t xi = x.index();
  return tape.record(std::move(out), {xi}, [&tape, xi, rows, width](auto& grads, std::size_t self) {
    Tensor<Scalar>* gx = tape.slot(grads, xi);
    if (!gx) return;
    const Scalar inv = Scalar(1) / Scalar(width);
    for (Index r = 0; r < rows; ++r) {
      const Scalar v = grads[self][r] * inv;
      for (Index j = 0; j < width; ++j) (*gx)[r * width + j] += v;
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tape<Scalar>& tape = x.tape();
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.index();
  return tape.record(std::move(out), {xi}, [&tape, xi](auto& grads, std::size_t self) {
    if (Tensor<Scalar>* gx = tape.slot(grads, xi)) gx->array() += grads[self].array();
  });
}

namespace {

/// Calls fn(out_offset, in_offset) for every element of the permuted view.
template <class F>
void for_each_permuted(const Shape& in_shape, const std::vector<Index>& axes, F&& fn) {
  const std::size_t rank = in_shape.size();
  std::vector<Index> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  std::vector<Index> out_dims(rank), step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_dims[i] = in_shape[axes[i]];
    step[i] = in_stride[axes[i]];
  }
  const Index total = element_count(in_shape);
  std::vector<Index> idx(rank, 0);
  Index in_off = 0;
  for (Index out_off = 0; out_off < total; ++out_off) {
    fn(out_off, in_off);
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_dims[d]) {
        in_off += step[d];
        break;
      }
      in_off -= step[d] * (out_dims[d] - 1);
      idx[d] = 0;
    }
  }
}

}  // namespace

template <class Scalar>
Var<Scalar> permute(const Var<Scalar>& x, const std::vector<Index>& axes) {
  Tape<Scalar>& tape = x.tape();
  const Shape& sx = x.shape();
  std::vector<Index> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  std::vector<Index> expected(sx.size());
  std::iota(expected.begin(), expected.end(), Index(0));
  if (sorted != expected) throw DimensionError("permute: axes are not a permutation of " + shape_string(sx));
  Shape out_shape(sx.size());
  for (std::size_t i = 0; i < sx.size(); ++i) out_shape[i] = sx[axes[i]];
  Tensor<Scalar> out(out_shape);
  const Scalar* in = x.value().data();
  for_each_permuted(sx, axes, [&](Index o, Index i) { out[o] = in[i]; });
  const std::size_t xi = x.index();
  return tape.record(std::move(out), {xi}, [&tape, xi, axes](auto& grads, std::size_t self) {
    Tensor<Scalar>* gx = tape.slot(grads, xi);
    if (!gx) return;
    const Tensor<Scalar>& g = grads[self];
    for_each_permuted(gx->shape(), axes, [&](Index o, Index i) { (*gx)[i] += g[o]; });
  });
}

template <class Scalar>
Var<Scalar> slice(const Var<Scalar>& x, Index axis, Index start, Index length) {
  Tape<Scalar>& tape = x.tape();
  const Shape& sx = x.shape();
  if (axis < 0 || axis >= static_cast<Index>(sx.size())) throw IndexError("slice: axis out of range");
  if (start < 0 || length < 1 || start + length > sx[axis]) {
    throw IndexError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") out of range for " +
                     shape_string(sx) + " axis " + std::to_string(axis));
  }
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= sx[i];
  for (std::size_t i = axis + 1; i < sx.size(); ++i) inner *= sx[i];
  Shape out_shape = sx;
  out_shape[axis] = length;
  Tensor<Scalar> out(out_shape);
  const Index full = sx[axis];
  const Scalar* in = x.value().data();
  for (Index o = 0; o < outer; ++o) {
    std::copy_n(in + (o * full + start) * inner, length * inner, out.data() + o * length * inner);
  }
  const std::size_t xi = x.index();
  return tape.record(std::move(out), {xi}, [&tape, xi, outer, inner, full, start, length](auto& grads, std::size_t self) {
    Tensor<Scalar>* gx = tape.slot(grads, xi);
    if (!gx) return;
    const Scalar* g = grads[self].data();
    for (Index o = 0; o < outer; ++o) {
      Scalar* dst = gx->data() + (o * full + start) * inner;
      const Scalar* src = g + o * length * inner;
      for (Index i = 0; i < length * inner; ++i) dst[i] += src[i];
    }
  });
}

template <class Scalar>
Var<Scalar> concat(const Var<Scalar>& a, const Var<Scalar>& b, Index axis) {
  require_same_tape(a, b, "concat");
  Tape<Scalar>& tape = a.tape();
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sa.size() == sb.size() && axis >= 0 && axis < static_cast<Index>(sa.size());
  for (std::size_t i = 0; ok && i < sa.size(); ++i) ok = static_cast<Index>(i) == axis || sa[i] == sb[i];
  if (!ok) throw DimensionError("concat: incompatible shapes " + shape_string(sa) + " and " + shape_string(sb));
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= sa[i];
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  const Index la = sa[axis] * inner, lb = sb[axis] * inner;
  Shape out_shape = sa;
  out_shape[axis] += sb[axis];
  Tensor<Scalar> out(out_shape);
  for (Index o = 0; o < outer; ++o) {
    std::copy_n(a.value().data() + o * la, la, out.data() + o * (la + lb));
    std::copy_n(b.value().data() + o * lb, lb, out.data() + o * (la + lb) + la);
  }
  const std::size_t ai = a.index(), bi = b.index();
  return tape.record(std::move(out), {ai, bi}, [&tape, ai, bi, outer, la, lb](auto& grads, std::size_t self) {
    const Scalar* g = grads[self].data();
    Tensor<Scalar>* ga = tape.slot(grads, ai);
    Tensor<Scalar>* gb = tape.slot(grads, bi);
    for (Index o = 0; o < outer; ++o) {
      const Scalar* row = g + o * (la + lb);
      if (ga) {
        for (Index i = 0; i < la; ++i) (*ga)[o * la + i] += row[i];
      }
      if (gb) {
        for (Index i = 0; i < lb; ++i) (*gb)[o * lb + i] += row[la + i];
      }
    }
  });
}

template <class Scalar>
Var<Scalar> embedding(const Var<Scalar>& table, std::span<const Index> indices) {
  Tape<Scalar>& tape = table.tape();
  if (table.shape().size() != 2) throw DimensionError("embedding table must be [V×d]");
  const Index vocab = table.shape()[0], width = table.shape()[1];
  if (indices.empty()) throw DimensionError("embedding lookup needs at least one index");
  for (Index id : indices) {
    if (id < 0 || id >= vocab) throw IndexError("embedding index " + std::to_string(id) + " outside [0, " +
                                                std::to_string(vocab) + ")");
  }
  std::vector<Index> ids(indices.begin(), indices.end());
  Tensor<Scalar> out(Shape{static_cast<Index>(ids.size()), width});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(table.value().data() + ids[r] * width, width, out.data() + static_cast<Index>(r) * width);
  }
  const std::size_t ti = table.index();
  return tape.record(std::move(out), {ti}, [&tape, ti, ids = std::move(ids), width](auto& grads, std::size_t self) {
    Tensor<Scalar>* gt = tape.slot(grads, ti);
    if (!gt) return;
    const Scalar* g = grads[self].data();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      for (Index j = 0; j < width; ++j) (*gt)[ids[r] * width + j] += g[static_cast<Index>(r) * width + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Loss

template <class Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  Tape<Scalar>& tape = logits.tape();
  const Shape& s = logits.shape();
  if (s.size() != 2) throw DimensionError("softmax_cross_entropy expects logits [B×C], got " + shape_string(s));
  const Index batch = s[0], classes = s[1];
  if (static_cast<Index>(labels.size()) != batch) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw IndexError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  // Evaluated in double; the saved gradient is rounded once to Scalar.
  auto dlogits = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(batch * classes));
  const Scalar* in = logits.value().data();
  double loss = 0;
  std::vector<double> p(static_cast<std::size_t>(classes));
  for (Index b = 0; b < batch; ++b) {
    const Scalar* row = in + b * classes;
    double mx = row[0];
    for (Index c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double total = 0;
    for (Index c = 0; c < classes; ++c) {
      p[c] = std::exp(static_cast<double>(row[c]) - mx);
      total += p[c];
    }
    const int y = labels[b];
    loss += -(static_cast<double>(row[y]) - mx - std::log(total));
    for (Index c = 0; c < classes; ++c) {
      const double onehot = c == y ? 1.0 : 0.0;
      (*dlogits)[b * classes + c] = static_cast<Scalar>((p[c] / total - onehot) / static_cast<double>(batch));
    }
  }
  loss /= static_cast<double>(batch);
  const std::size_t li = logits.index();
  return tape.record(Tensor<Scalar>::scalar(static_cast<Scalar>(loss)), {li},
                     [&tape, li, dlogits](auto& grads, std::size_t self) {
                       Tensor<Scalar>* gl = tape.slot(grads, li);
                       if (!gl) return;
                       const Scalar g = grads[self][0];
                       for (std::size_t i = 0; i < dlogits->size(); ++i) (*gl)[static_cast<Index>(i)] += g * (*dlogits)[i];
                     });
}

// ---------------------------------------------------------------------------

#define SPURLENS_INSTANTIATE(S)                                                                  \
  template class Tape<S>;                                                                        \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                          \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, Index, Index);                            \
  template Var<S> relu(const Var<S>&);                                                           \
  template Var<S> gelu(const Var<S>&);                                                           \
  template Var<S> sigmoid(const Var<S>&);                                                        \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                    \
  template Var<S> softmax(const Var<S>&);                                                        \
  template Var<S> add(const Var<S>&, const Var<S>&);                                             \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                             \
  template Var<S> scale(const Var<S>&, S);                                                       \
  template Var<S> add_bias(const Var<S>&, const Var<S>&, Index);                                 \
  template Var<S> sum(const Var<S>&);                                                            \
  template Var<S> mean(const Var<S>&);                                                           \
  template Var<S> mean_last(const Var<S>&);                                                      \
  template Var<S> reshape(const Var<S>&, Shape);                                                 \
  template Var<S> permute(const Var<S>&, const std::vector<Index>&);                             \
  template Var<S> slice(const Var<S>&, Index, Index, Index);                                     \
  template Var<S> concat(const Var<S>&, const Var<S>&, Index);                                   \
  template Var<S> embedding(const Var<S>&, std::span<const Index>);                              \
  template Var<S> softmax_cross_entropy(const Var<S>&, std::span<const int>);

SPURLENS_INSTANTIATE(float)
SPURLENS_INSTANTIATE(double)

#undef SPURLENS_INSTANTIATE

}  // namespace spurlens
