// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same buffer, which is what
// lets a Tape route gradients back to parameters. Data is treated as
// immutable after construction; only optimizers write through
// mutable_data(). Ops record onto the thread's active Tape (see TapeScope)
// when at least one input requires a gradient, so forward-only evaluation
// over shared weights records nothing and is safe from many threads.

#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cvlm/error.hpp"

namespace cvlm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class DType { kF32, kF64 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::kF32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::kF64;
}

const char* dtype_name(DType dtype);

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0 for leaves and untracked values
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<const T> data() const { return node_->data; }
  // Reserved for parameter updates; never called on tape intermediates.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool value);

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  // Allocates a zero gradient buffer on first use.
  std::span<T> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  std::uint64_t tape_id() const { return node_->tape_id; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Deep copy with no gradient linkage.
  Tensor detach() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->data[i]);
    return Tensor<U>(shape(), std::move(out));
  }

 private:
  friend class Tape<T>;
  std::shared_ptr<detail::TensorNode<T>> node_;
};

// Ordered record of differentiable ops. One tape per training step; a tape is
// never shared across threads.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const T> output_grad)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }

  void record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T>& output, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
  // into every reachable tensor that requires a gradient. Consumes the tape.
  void backward(const Tensor<T>& loss);

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::string op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn fn;
  };

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

template <typename T>
Tape<T>* active_tape();

// Makes `tape` the active tape of the calling thread for the scope lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  tape.backward(loss);
}

namespace detail {

// Records an op when a tape is active and any input needs a gradient.
template <typename T, typename Fn>
void record_op(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
               Fn&& backward_fn) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;
  tape->record(op, std::move(inputs), output, std::forward<Fn>(backward_fn));
}

// Adds `delta` into t's gradient when t participates in differentiation.
template <typename T>
void accumulate_grad(Tensor<T>& t, std::span<const T> delta);

}  // namespace detail

enum class GeluMode { kTanh, kErf };

// ---- ops -------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise product of equal shapes.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

// x[..., d] + bias[d]; the only broadcast the library supports.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> gelu(const Tensor<T>& x, GeluMode mode = GeluMode::kTanh);

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids);

// Mean over masked positions of -log softmax(logits)[t, targets[t]].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                        const std::vector<bool>& mask);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Column block [start, start + count) of a 2-D tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count);

// Leading-axis block [start, start + count).
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count);

// Concatenation along the leading axis; trailing extents must agree.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

}  // namespace cvlm
