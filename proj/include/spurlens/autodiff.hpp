#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "spurlens/tensor.hpp"

namespace spurlens {

template <class Scalar>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the
/// owning tape is alive.
template <class Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Accumulated gradient; zeros if backward never reached this node.
  const Tensor<Scalar>& grad() const;

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Ordered record of primitive applications. Nodes are appended in
/// evaluation order, so every node's inputs precede it and a reverse sweep
/// is a valid topological order for backward.
template <class Scalar>
class Tape {
 public:
  using Grads = std::vector<Tensor<Scalar>>;
  /// Reads grads[self] and accumulates into the grads of its inputs.
  using BackwardFn = std::function<void(Grads& grads, std::size_t self)>;

  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad = true);
  Var<Scalar> constant(Tensor<Scalar> value) { return leaf(std::move(value), false); }

  /// Appends the result of a primitive. The node requires grad iff any
  /// input does; otherwise the backward closure is dropped.
  Var<Scalar> record(Tensor<Scalar> value, std::vector<std::size_t> inputs, BackwardFn backward);

  /// Reverse sweep from a one-element root. Gradients of every node reached
  /// are added to whatever is already stored, so repeated calls accumulate.
  void backward(const Var<Scalar>& root);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  const Tensor<Scalar>& value(std::size_t i) const { return nodes_.at(i).value; }
  const Tensor<Scalar>& grad(std::size_t i) const;

  /// Gradient slot of `input` inside a backward sweep, zero-initialised on
  /// first touch. Returns nullptr when the input does not require grad.
  Tensor<Scalar>* slot(Grads& grads, std::size_t input) const;

 private:
  std::vector<Node> nodes_;
  mutable Tensor<Scalar> empty_grad_;
};

template <class Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return tape_->value(index_);
}

template <class Scalar>
bool Var<Scalar>::requires_grad() const {
  return tape_->node(index_).requires_grad;
}

template <class Scalar>
const Tensor<Scalar>& Var<Scalar>::grad() const {
  return tape_->grad(index_);
}

// ---------------------------------------------------------------------------
// Primitives. Every op records onto the tape of its first argument.
// No broadcasting except add_bias.

/// [m×k]·[k×n] → [m×n], or batched [B×m×k]·[B×k×n] → [B×m×n].
template <class Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// Cross-correlation. Input [C×H×W] or [N×C×H×W]; kernels [F×C×k×k].
template <class Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernels, Index stride, Index padding);

template <class Scalar>
Var<Scalar> relu(const Var<Scalar>& x);

/// Exact (erf) GELU.
template <class Scalar>
Var<Scalar> gelu(const Var<Scalar>& x);

template <class Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x);

/// Normalises over the last axis; gamma and beta have the last axis' size.
template <class Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-5));

/// Softmax over the last axis, max-subtracted.
template <class Scalar>
Var<Scalar> softmax(const Var<Scalar>& x);

template <class Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);

template <class Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);

template <class Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor);

/// x + b where b's shape equals x.shape[axis : axis + b.rank].
template <class Scalar>
Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& bias, Index axis);

/// Sum of all elements, shape {1}.
template <class Scalar>
Var<Scalar> sum(const Var<Scalar>& x);

template <class Scalar>
Var<Scalar> mean(const Var<Scalar>& x);

/// Mean over the last axis: [..., n] → [...].
template <class Scalar>
Var<Scalar> mean_last(const Var<Scalar>& x);

template <class Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape);

/// Axis permutation; out.shape[i] = x.shape[axes[i]].
template <class Scalar>
Var<Scalar> permute(const Var<Scalar>& x, const std::vector<Index>& axes);

template <class Scalar>
Var<Scalar> slice(const Var<Scalar>& x, Index axis, Index start, Index length);

template <class Scalar>
Var<Scalar> concat(const Var<Scalar>& a, const Var<Scalar>& b, Index axis);

/// Row gather from a [V×d] table.
template <class Scalar>
Var<Scalar> embedding(const Var<Scalar>& table, std::span<const Index> indices);

/// Mean over the batch of -log softmax(logits)[label]. Logits [B×C].
template <class Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels);

}  // namespace spurlens
