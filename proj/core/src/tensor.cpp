// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace cvlm {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
      return "invalid_argument";
    case ErrorCode::kShapeMismatch:
      return "shape_mismatch";
    case ErrorCode::kOutOfRange:
      return "out_of_range";
    case ErrorCode::kParse:
      return "parse_error";
    case ErrorCode::kIo:
      return "io_error";
    case ErrorCode::kNotFound:
      return "not_found";
    case ErrorCode::kBadFormat:
      return "bad_format";
    case ErrorCode::kUndecodableImage:
      return "undecodable_image";
    case ErrorCode::kContextOverflow:
      return "context_overflow";
    case ErrorCode::kNonFinite:
      return "non_finite";
    case ErrorCode::kAutograd:
      return "autograd";
  }
  return "unknown";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) {
  return dtype == DType::kF32 ? "f32" : "f64";
}

namespace {

[[noreturn]] void shape_error(const std::string& what) {
  throw Error(ErrorCode::kShapeMismatch, what);
}

std::atomic<std::uint64_t> g_next_tape_id{1};

template <typename T>
Tape<T>*& tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

std::size_t last_dim(const Shape& s) {
  return s.empty() ? 1 : s.back();
}

// c (m x n) += a (m x k) * b (k x n). Each output element accumulates over k in
// ascending order regardless of blocking, so a row's result does not depend on
// which other rows share the call.
template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kRowBlock = 8;
  for (std::size_t i0 = 0; i0 < m; i0 += kRowBlock) {
    const std::size_t i1 = std::min(m, i0 + kRowBlock);
    for (std::size_t t = 0; t < k; ++t) {
      const T* brow = b + t * n;
      for (std::size_t i = i0; i < i1; ++i) {
        const T av = a[i * k + t];
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<detail::TensorNode<T>>()) {
  if (shape_numel(shape) != data.size()) {
    shape_error("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) shape_error("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

// ---- Tape -------------------------------------------------------------------

template <typename T>
Tape<T>::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

template <typename T>
void Tape<T>::record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
                     BackwardFn fn) {
  output.node_->requires_grad = true;
  output.node_->tape_id = id_;
  nodes_.push_back(Node{std::string(op), std::move(inputs), output, std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorCode::kAutograd,
                "backward needs a scalar loss, got shape " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (loss.tape_id() != id_) {
    throw Error(ErrorCode::kAutograd, "loss tensor was not produced under this tape (detached)");
  }
  Tensor<T> seed = loss;
  seed.mutable_grad()[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->fn(it->output.grad());
    it->output.zero_grad();
  }
  nodes_.clear();
}

template <typename T>
Tape<T>* active_tape() {
  return tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  tape_slot<T>() = previous_;
}

namespace detail {

template <typename T>
void accumulate_grad(Tensor<T>& t, std::span<const T> delta) {
  if (!t.requires_grad()) return;
  auto g = t.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

// ---- ops --------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> c(m * n, T(0));
  gemm_accumulate(a.data().data(), b.data().data(), c.data(), m, k, n);
  Tensor<T> out({m, n}, std::move(c));
  detail::record_op<T>("matmul", {a, b}, out, [=, a = a, b = b](std::span<const T> dc) mutable {
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      const T* bd = b.data().data();
      for (std::size_t i = 0; i < m; ++i) {
        const T* drow = dc.data() + i * n;
        for (std::size_t t = 0; t < k; ++t) {
          const T* brow = bd + t * n;
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
          ga[i * k + t] += acc;
        }
      }
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      const T* ad = a.data().data();
      for (std::size_t i = 0; i < m; ++i) {
        const T* drow = dc.data() + i * n;
        for (std::size_t t = 0; t < k; ++t) {
          const T av = ad[i * k + t];
          T* grow = gb.data() + t * n;
          for (std::size_t j = 0; j < n; ++j) grow[j] += av * drow[j];
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    shape_error("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor<T> result(a.shape(), std::move(out));
  detail::record_op<T>("add", {a, b}, result, [=, a = a, b = b](std::span<const T> g) mutable {
    detail::accumulate_grad(a, g);
    detail::accumulate_grad(b, g);
  });
  return result;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    shape_error("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor<T> result(a.shape(), std::move(out));
  detail::record_op<T>("mul", {a, b}, result, [=, a = a, b = b](std::span<const T> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
    }
  });
  return result;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  Tensor<T> result(x.shape(), std::move(out));
  detail::record_op<T>("scale", {x}, result, [=, x = x](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
  return result;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t d = last_dim(x.shape());
  if (bias.rank() != 1 || bias.dim(0) != d) {
    shape_error("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  const T* bd = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] + bd[j];
  }
  Tensor<T> result(x.shape(), std::move(out));
  detail::record_op<T>("add_bias", {x, bias}, result,
                       [=, x = x, bias = bias](std::span<const T> g) mutable {
                         detail::accumulate_grad(x, g);
                         if (bias.requires_grad()) {
                           auto gb = bias.mutable_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                           }
                         }
                       });
  return result;
}

namespace {

template <typename T>
T gelu_value(T x, GeluMode mode) {
  if (mode == GeluMode::kErf) {
    return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  }
  const T c = std::sqrt(T(2) / std::numbers::pi_v<T>);
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_derivative(T x, GeluMode mode) {
  if (mode == GeluMode::kErf) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    return cdf + x * pdf;
  }
  const T c = std::sqrt(T(2) / std::numbers::pi_v<T>);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

}  // namespace

template <typename T>
Tensor<T> gelu(const Tensor<T>& x, GeluMode mode) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(x.data()[i], mode);
  Tensor<T> result(x.shape(), std::move(out));
  detail::record_op<T>("gelu", {x}, result, [=, x = x](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i] * gelu_derivative(x.data()[i], mode);
    }
  });
  return result;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t n = last_dim(x.shape());
  if (n == 0) shape_error("softmax_rows needs a non-empty last axis");
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  Tensor<T> result(x.shape(), std::move(out));
  Tensor<T> y = result;
  detail::record_op<T>("softmax_rows", {x}, result,
                       [=, x = x, yv = std::vector<T>(y.data().begin(), y.data().end())](
                           std::span<const T> g) mutable {
                         auto gx = x.mutable_grad();
                         for (std::size_t r = 0; r < rows; ++r) {
                           const T* yr = yv.data() + r * n;
                           const T* gr = g.data() + r * n;
                           T dot = 0;
                           for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                           for (std::size_t j = 0; j < n; ++j)
                             gx[r * n + j] += yr[j] * (gr[j] - dot);
                         }
                       });
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = last_dim(x.shape());
  if (d < 2) shape_error("layer_norm needs a last axis of at least 2, got " + shape_str(x.shape()));
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    shape_error("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                shape_str(bias.shape()) + " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const T* xd = x.data().data();
  const T* gd = gain.data().data();
  const T* bd = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  Tensor<T> result(x.shape(), std::move(out));
  detail::record_op<T>("layer_norm", {x, gain, bias}, result,
                       [=, x = x, gain = gain, bias = bias, xhat = std::move(xhat),
                        inv_std = std::move(inv_std)](std::span<const T> g) mutable {
                         const T* gn = gain.data().data();
                         if (x.requires_grad()) {
                           auto gx = x.mutable_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             T mean_dh = 0, mean_dh_h = 0;
                             for (std::size_t j = 0; j < d; ++j) {
                               const T dh = g[r * d + j] * gn[j];
                               mean_dh += dh;
                               mean_dh_h += dh * xhat[r * d + j];
                             }
                             mean_dh /= T(d);
                             mean_dh_h /= T(d);
                             for (std::size_t j = 0; j < d; ++j) {
                               const T dh = g[r * d + j] * gn[j];
                               gx[r * d + j] +=
                                   inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                             }
                           }
                         }
                         if (gain.requires_grad()) {
                           auto gg = gain.mutable_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < d; ++j)
                               gg[j] += g[r * d + j] * xhat[r * d + j];
                           }
                         }
                         if (bias.requires_grad()) {
                           auto gb = bias.mutable_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                           }
                         }
                       });
  return result;
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2)
    shape_error("embedding table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw Error(ErrorCode::kOutOfRange, "embedding id " + std::to_string(ids[i]) + " at index " +
                                              std::to_string(i) + " outside [0, " +
                                              std::to_string(vocab) + ")");
    }
  }
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Tensor<T> result({ids.size(), d}, std::move(out));
  detail::record_op<T>("embedding_lookup", {table}, result,
                       [table = table, d, idv = std::vector<int>(ids.begin(), ids.end())](
                           std::span<const T> g) mutable {
                         auto gt = table.mutable_grad();
                         for (std::size_t i = 0; i < idv.size(); ++i) {
                           T* row = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                           for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                         }
                       });
  return result;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                        const std::vector<bool>& mask) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size() || mask.size() != targets.size()) {
    shape_error("cross_entropy: logits " + shape_str(logits.shape()) + ", " +
                std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) +
                " mask entries");
  }
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  std::size_t count = 0;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    ++count;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw Error(ErrorCode::kOutOfRange, "cross_entropy target " + std::to_string(targets[t]) +
                                              " at position " + std::to_string(t) +
                                              " outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (count == 0)
    throw Error(ErrorCode::kInvalidArgument, "cross_entropy: every position is masked out");

  std::vector<T> probs(rows * vocab, T(0));
  T total = 0;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    const T* row = logits.data().data() + t * vocab;
    const T mx = *std::max_element(row, row + vocab);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    total += lse - row[targets[t]];
    for (std::size_t j = 0; j < vocab; ++j) probs[t * vocab + j] = std::exp(row[j] - lse);
  }
  const T inv = T(1) / T(count);
  Tensor<T> result({1}, {total * inv});
  detail::record_op<T>("cross_entropy", {logits}, result,
                       [=, logits = logits, probs = std::move(probs),
                        tv = std::vector<int>(targets.begin(), targets.end()),
                        mk = mask](std::span<const T> g) mutable {
                         auto gl = logits.mutable_grad();
                         const T s = g[0] * inv;
                         for (std::size_t t = 0; t < rows; ++t) {
                           if (!mk[t]) continue;
                           for (std::size_t j = 0; j < vocab; ++j)
                             gl[t * vocab + j] += s * probs[t * vocab + j];
                           gl[t * vocab + tv[t]] -= s;
                         }
                       });
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  Tensor<T> result({1}, {total});
  detail::record_op<T>("sum", {x}, result, [=, x = x](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (auto& v : gx) v += g[0];
  });
  return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_error("reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> result(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  detail::record_op<T>("reshape", {x}, result,
                       [=, x = x](std::span<const T> g) mutable { detail::accumulate_grad(x, g); });
  return result;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  if (x.rank() != 2 || start + count > x.dim(1)) {
    shape_error("slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data().data() + r * cols + start, count, out.data() + r * count);
  }
  Tensor<T> result({rows, count}, std::move(out));
  detail::record_op<T>("slice_cols", {x}, result, [=, x = x](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < count; ++j) gx[r * cols + start + j] += g[r * count + j];
    }
  });
  return result;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  if (x.rank() == 0 || start + count > x.dim(0)) {
    shape_error("slice_rows [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                shape_str(x.shape()));
  }
  const std::size_t stride = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = count;
  const auto first = x.data().begin() + static_cast<std::ptrdiff_t>(start * stride);
  Tensor<T> result(std::move(shape),
                   std::vector<T>(first, first + static_cast<std::ptrdiff_t>(count * stride)));
  detail::record_op<T>("slice_rows", {x}, result, [=, x = x](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[start * stride + i] += g[i];
  });
  return result;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) shape_error("concat_rows of zero tensors");
  Shape shape = parts.front().shape();
  if (shape.empty()) shape_error("concat_rows needs tensors of rank >= 1");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() ||
        !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      shape_error("concat_rows trailing extents differ: " + shape_str(shape) + " vs " +
                  shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  shape[0] = rows;
  std::vector<T> out;
  out.reserve(shape_numel(shape));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor<T> result(std::move(shape), std::move(out));
  detail::record_op<T>("concat_rows", parts, result,
                       [inputs = parts](std::span<const T> g) mutable {
                         std::size_t offset = 0;
                         for (auto& p : inputs) {
                           detail::accumulate_grad(p, g.subspan(offset, p.numel()));
                           offset += p.numel();
                         }
                       });
  return result;
}

#define CVLM_INSTANTIATE_TENSOR(T)                                                           \
  template class Tensor<T>;                                                                  \
  template class Tape<T>;                                                                    \
  template class TapeScope<T>;                                                               \
  template Tape<T>* active_tape<T>();                                                        \
  template void detail::accumulate_grad<T>(Tensor<T>&, std::span<const T>);                  \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                          \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> gelu<T>(const Tensor<T>&, GeluMode);                                    \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                      \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> embedding_lookup<T>(const Tensor<T>&, std::span<const int>);            \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>,                \
                                      const std::vector<bool>&);                             \
  template Tensor<T> sum<T>(const Tensor<T>&);                                               \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                    \
  template Tensor<T> slice_cols<T>(const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> concat_rows<T>(const std::vector<Tensor<T>>&);

CVLM_INSTANTIATE_TENSOR(float)
CVLM_INSTANTIATE_TENSOR(double)

#undef CVLM_INSTANTIATE_TENSOR

}  // namespace cvlm
